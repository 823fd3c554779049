use super::*;
use crate::accelerator::builtin_meta_vr;
use crate::intramap::{enumerate_mappings, evaluate_nest, plan_placement, Mapper, Placement};
use crate::scheduler::{schedule, ScheduleOptions};
use crate::tilegraph::{generate_tile_graph, CutSpec};
use crate::workload::{micro, micro_with, strip_states};

fn presets(w: &WorkloadGraph) -> Vec<CutSpec> {
    let t = w.total_timesteps;
    let mut out = Vec::new();
    for tb in [1, 2, t] {
        out.push(CutSpec::uniform(w.n_blocks(), 1, tb));
        out.push(CutSpec { temporal: vec![tb; w.n_blocks()], ..CutSpec::fused(w, tb) });
    }
    out
}

fn unique_shapes(w: &WorkloadGraph, accel: &AcceleratorModel) -> Vec<TileShape> {
    let cap = accel.cores[0].global_capacity_bits();
    let mut seen = Vec::new();
    for cuts in presets(w) {
        let tg = generate_tile_graph(w, &cuts).unwrap();
        for tile in tg.tiles.iter().filter(|t| t.op != 0) {
            let probe = TileShape::from_tile(w, tile, Placement::default(), cap, 0).unwrap();
            let shape = TileShape { placement: plan_placement(&probe, cap), ..probe };
            if !seen.contains(&shape) {
                seen.push(shape);
            }
        }
    }
    seen
}

#[test]
fn every_enumerated_nest_matches_analytical_counts() {
    let w = micro(2).unwrap();
    for gb in [1 << 20, 256] {
        let accel = builtin_meta_vr(gb).unwrap();
        for shape in unique_shapes(&w, &accel) {
            let all = enumerate_mappings(&accel, &shape);
            assert!(!all.is_empty());
            for (nest, _) in &all {
                let cost = evaluate_nest(&accel, &shape, nest).unwrap();
                let sim = simulate_nest(&accel, &shape, nest).unwrap();
                assert_eq!(sim.bits, analytical_bits(&cost.accesses), "{}", nest.describe());
                assert_eq!(sim.energy_fj, cost.energy_fj);
                assert_eq!(sim.latency_cycles, cost.latency_cycles);
            }
        }
    }
}

#[test]
fn fully_resident_tile_moves_each_operand_once() {
    let w = micro_with(1, 8, 4, 4).unwrap();
    let tg = generate_tile_graph(&w, &CutSpec::tb_lbl(&w)).unwrap();
    let accel = builtin_meta_vr(1 << 20).unwrap();
    let shape = TileShape::from_tile(&w, &tg.tiles[tg.op_tiles[1][0]], Placement::default(), 1 << 23, 0).unwrap();
    let (nest, _) = enumerate_mappings(&accel, &shape)
        .into_iter()
        .find(|(n, _)| n.residency.iter().all(|r| r.levels.iter().skip(1).all(|&(_, d)| d == n.loops.len())))
        .unwrap();
    let sim = simulate_nest(&accel, &shape, &nest).unwrap();
    let gb = Loc::Level(2);
    let crossing = |kind| sim.bits.iter().filter(|(k, _)| k.1 == gb && k.2 == kind).map(|(_, b)| b).sum::<u64>();
    assert_eq!(crossing(OperandKind::Weight), shape.weight_bits());
    assert_eq!(crossing(OperandKind::InputFeature), shape.input_bits());
    assert_eq!(crossing(OperandKind::OutputFeature), shape.output_elements());
    assert_eq!(crossing(OperandKind::AccumulatorState), 0);
}

#[test]
fn batched_state_never_leaves_the_accumulator() {
    let w = micro_with(1, 8, 4, 4).unwrap();
    let tg = generate_tile_graph(&w, &CutSpec::tb_lbl(&w)).unwrap();
    let mapper = Mapper::new(builtin_meta_vr(1 << 20).unwrap());
    let cost = mapper.map_tile(&w, &tg.tiles[tg.op_tiles[1][0]], 0).unwrap();
    let cap = mapper.accel().cores[0].global_capacity_bits();
    let shape = TileShape::from_tile(&w, &tg.tiles[tg.op_tiles[1][0]], Placement::default(), cap, 0).unwrap();
    let sim = simulate_nest(mapper.accel(), &shape, &cost.nest).unwrap();
    assert!(sim.bits.keys().all(|k| k.2 != OperandKind::AccumulatorState));
}

#[test]
fn overfull_level_is_reported() {
    let w = micro(2).unwrap();
    let accel = builtin_meta_vr(1 << 20).unwrap();
    let shape = unique_shapes(&w, &accel).into_iter().find(|s| s.t == 4).unwrap();
    let (nest, _) = enumerate_mappings(&accel, &shape).into_iter().next().unwrap();
    let mut tiny = accel.clone();
    for l in &mut tiny.cores[0].levels {
        l.capacity_bits = 8;
    }
    assert!(simulate_nest(&accel, &shape, &nest).is_ok());
    assert!(simulate_nest(&tiny, &shape, &nest).is_err());
}

fn replay(w: &WorkloadGraph, cuts: &CutSpec, gb: u64, prefetch: bool) -> (ScheduleResult, SimCounters) {
    let tg = generate_tile_graph(w, cuts).unwrap();
    let mapper = Mapper::new(builtin_meta_vr(gb).unwrap());
    let res = schedule(w, &tg, &mapper, &vec![0; w.nodes.len()], ScheduleOptions { prefetch }).unwrap();
    let sim = simulate_schedule(w, &tg, mapper.accel(), &res).unwrap();
    (res, sim)
}

#[test]
fn schedule_replay_matches_dram_traffic_and_energy() {
    for k in [2, 3] {
        let w = micro(k).unwrap();
        for cuts in presets(&w) {
            for gb in [128 * 1024, 200, 96] {
                let (res, sim) = replay(&w, &cuts, gb, false);
                assert_eq!(sim.dram_bits, res.dram_bits, "micro_{k} {cuts:?} {gb}");
                assert_eq!(sim.dram_bits_by_class, res.dram_bits_by_class.clone().into_iter().filter(|(_, v)| *v > 0).collect());
                assert_eq!(sim.energy_fj, res.energy_fj, "micro_{k} {cuts:?} {gb}");
                assert!(sim.peak_bits.values().all(|&b| b <= gb * 8));
            }
        }
    }
}

#[test]
fn prefetch_changes_timing_only() {
    let w = micro(3).unwrap();
    let (a, _) = replay(&w, &CutSpec::st_lbl(&w), 200, false);
    let (b, sim) = replay(&w, &CutSpec::st_lbl(&w), 200, true);
    assert_eq!(a.dram_bits, b.dram_bits);
    assert_eq!(a.energy_fj, b.energy_fj);
    assert_eq!(sim.dram_bits, b.dram_bits);
    assert!(b.latency_cycles <= a.latency_cycles);
}

#[test]
fn unbounded_trace_moves_inputs_weights_outputs() {
    let w = micro(3).unwrap();
    let (_, sim) = replay(&w, &CutSpec::st_lbl(&w), 1 << 30, true);
    let last = w.nodes.len() - 1;
    let expected = w.nodes[0].output_bits_per_timestep() * 4
        + w.nodes.iter().map(|n| n.weight_bits()).sum::<u64>()
        + w.nodes[last].output_bits_per_timestep() * 4;
    assert_eq!(sim.dram_bits, expected);
}

#[test]
fn inverted_dependency_in_trace_is_rejected() {
    let w = micro(3).unwrap();
    let tg = generate_tile_graph(&w, &CutSpec::st_lbl(&w)).unwrap();
    let mapper = Mapper::new(builtin_meta_vr(1 << 20).unwrap());
    let mut res = schedule(&w, &tg, &mapper, &vec![0; w.nodes.len()], ScheduleOptions::default()).unwrap();
    res.exec.swap(0, 1);
    assert!(simulate_schedule(&w, &tg, mapper.accel(), &res).is_err());
}

#[test]
fn functional_orders() {
    let mut r = rng(7);
    for k in [2, 3] {
        let w = micro(k).unwrap();
        for cuts in presets(&w) {
            let tg = generate_tile_graph(&w, &cuts).unwrap();
            assert!(functional_check(&w, &tg, &crate::scheduler::scheduling_order(&w, &tg), 1));
            for i in 0..5 {
                let order = random_order(&w, &tg, &mut r);
                assert!(functional_check(&w, &tg, &order, i));
                if let Some(bad) = invert_state_edge(&order, &tg, &mut r) {
                    assert!(!functional_check(&w, &tg, &bad, i));
                }
            }
        }
    }
}

#[test]
fn stripped_network_accepts_any_order() {
    let w = strip_states(&micro(3).unwrap(), usize::MAX);
    assert!(w.nodes.iter().all(|n| !n.stateful));
    let tg = generate_tile_graph(&w, &CutSpec::uniform(w.n_blocks(), 4, 1)).unwrap();
    assert!(tg.state_edges.is_empty());
    let mut r = rng(3);
    for i in 0..10 {
        assert!(functional_check(&w, &tg, &random_order(&w, &tg, &mut r), i));
    }
}

#[test]
fn cross_check_passes_on_micro_presets() {
    let w = micro(3).unwrap();
    let mapper = Mapper::new(builtin_meta_vr(200).unwrap());
    for cuts in presets(&w) {
        let tg = generate_tile_graph(&w, &cuts).unwrap();
        let check = cross_check(&w, &tg, &mapper, 3, 9).unwrap();
        assert_eq!(check.mismatch, None, "{cuts:?}");
        assert!(check.nests > 0);
        assert_eq!((check.replays, check.orders), (1, 4));
    }
}
