use super::*;
use crate::accelerator::builtin_meta_vr;
use crate::tilegraph::{generate_tile_graph, CutSpec};
use crate::workload::{micro_with, parse_workload};

fn micro_shape(tbatch: u64, spatial: u64, gb_bytes: u64, tile_idx: usize) -> (AcceleratorModel, TileShape) {
    let w = micro_with(1, 8, 4, 4).unwrap();
    let g = generate_tile_graph(&w, &CutSpec::uniform(1, spatial, tbatch)).unwrap();
    let accel = builtin_meta_vr(gb_bytes).unwrap();
    let tile = &g.tiles[g.op_tiles[1][tile_idx]];
    let cap = accel.cores[0].global_capacity_bits();
    let shape = TileShape::from_tile(&w, tile, Placement::default(), cap, 0).unwrap();
    (accel, shape)
}

fn conv_shape(doc: &str, gb_bytes: u64) -> (AcceleratorModel, TileShape) {
    let w = parse_workload(doc).unwrap();
    let g = generate_tile_graph(&w, &CutSpec::tb_lbl(&w)).unwrap();
    let accel = builtin_meta_vr(gb_bytes).unwrap();
    let cap = accel.cores[0].global_capacity_bits();
    let probe = TileShape::from_tile(&w, &g.tiles[g.op_tiles[1][0]], Placement::default(), cap, 0).unwrap();
    let placement = plan_placement(&probe, cap);
    (accel, TileShape { placement, ..probe })
}

const POINTWISE: &str = r#"
timesteps = 1
[[layers]]
id = "in"
class = "input"
channels = 4
height = 2
width = 16
spiking = false
[[layers]]
id = "pw"
class = "pointwise"
inputs = ["in"]
out_channels = 32
"#;

const BIG_WEIGHTS: &str = r#"
timesteps = 1
[[layers]]
id = "in"
class = "input"
channels = 256
height = 2
width = 2
[[layers]]
id = "conv"
class = "conv2d"
inputs = ["in"]
out_channels = 256
kernel = 3
padding = 1
"#;

#[test]
fn fully_resident_mapping_exists() {
    let (accel, shape) = conv_shape(POINTWISE, 1 << 20);
    let all = enumerate_mappings(&accel, &shape);
    assert!(!all.is_empty());
    let full = all.iter().find(|(nest, _)| {
        nest.residency.iter().filter(|r| matches!(r.kind, OperandKind::Weight | OperandKind::InputFeature)).all(|r| {
            r.levels.iter().filter(|(l, _)| *l != Loc::Pe).all(|&(_, d)| d == nest.loops.len())
        })
    });
    let (nest, _) = full.expect("fully resident mapping");
    let cost = evaluate_nest(&accel, &shape, nest).unwrap();
    // Weights and inputs cross the global-buffer boundary exactly once.
    let gb = Loc::Level(2);
    assert_eq!(cost.bits_between(OperandKind::Weight, Loc::Level(1), gb).0, 32 * 4 * 4);
    assert_eq!(cost.bits_between(OperandKind::InputFeature, Loc::Level(0), gb).0, 4 * 2 * 16 * 4);
}

#[test]
fn stateful_nests_keep_reduction_inside_time() {
    for tbatch in [1, 2, 4] {
        let (accel, shape) = micro_shape(tbatch, 1, 1 << 20, 0);
        assert!(shape.stateful);
        let all = enumerate_mappings(&accel, &shape);
        assert!(!all.is_empty());
        for (nest, _) in &all {
            let first_t = nest.loops.iter().position(|l| l.axis == Axis::T).unwrap_or(nest.loops.len());
            let last_red = nest.loops.iter().rposition(|l| l.axis.is_reduction()).map_or(0, |i| i + 1);
            assert!(last_red <= first_t, "{}", nest.describe());
        }
    }
}

#[test]
fn factors_cover_dimensions() {
    let (accel, shape) = conv_shape(BIG_WEIGHTS, 1 << 20);
    for (nest, _) in enumerate_mappings(&accel, &shape) {
        for axis in Axis::ALL {
            let t: u64 = nest.loops.iter().filter(|l| l.axis == axis).map(|l| l.bound).product();
            let s: u64 = nest.spatial.iter().filter(|(a, _)| *a == axis).map(|(_, u)| u).product();
            assert_eq!(t * s, shape.dim(axis), "{axis:?} in {}", nest.describe());
        }
        assert!(nest.loops.iter().filter(|l| !matches!(l.axis, Axis::FY | Axis::FX)).count() <= LPF_LIMIT);
    }
}

#[test]
fn oversized_weights_spill_to_dram() {
    // 256*256*9*4 bits = 288 KiB of weights against a 128 KiB global buffer.
    let (accel, shape) = conv_shape(BIG_WEIGHTS, 128 * 1024);
    assert!(shape.weight_bits() > accel.cores[0].levels[1].capacity_bits + accel.cores[0].global_capacity_bits());
    assert!(shape.placement.weight);
    let all = enumerate_mappings(&accel, &shape);
    assert!(!all.is_empty());
    for (nest, alloc) in &all {
        assert_eq!(nest.residency(OperandKind::Weight).unwrap().levels.last().unwrap().0, Loc::Dram);
        for &(loc, bits) in alloc {
            if let Loc::Level(i) = loc {
                assert!(bits <= level_capacity(&accel, &shape, i));
            }
        }
    }
}

#[test]
fn compute_and_dram_energy_arithmetic() {
    let (accel, shape) = micro_shape(4, 1, 1 << 20, 0);
    let (cost, _) = best_mapping(&accel, &shape).unwrap();
    assert!(shape.sop);
    let compute = cost.breakdown.iter().find(|e| e.operand.is_none()).unwrap().fj;
    assert_eq!(compute, shape.ops() * 70);
    assert_eq!(cost.energy_fj, cost.breakdown.iter().map(|e| e.fj).sum::<u64>());

    let (accel, shape) = conv_shape(BIG_WEIGHTS, 128 * 1024);
    let (cost, _) = best_mapping(&accel, &shape).unwrap();
    let (down, _) = cost.bits_between(OperandKind::Weight, Loc::Level(2), Loc::Dram);
    assert!(down > 0);
    let dram_fj: u64 = cost.breakdown.iter().filter(|e| e.loc == Loc::Dram && e.operand == Some(OperandKind::Weight)).map(|e| e.fj).sum();
    assert_eq!(dram_fj, down * 11_000);
    assert_eq!(cost.energy_fj, cost.breakdown.iter().map(|e| e.fj).sum::<u64>());
    assert!(cost.latency_cycles >= shape.ops().div_ceil(16 * 32));
}

#[test]
fn weight_refills_follow_irrelevant_loops() {
    let (accel, shape) = micro_shape(1, 1, 1 << 20, 0);
    let spatial = spatial_unrolling(&shape, &accel.cores[0].pe);
    // Weight level at depth 1 (FY only): the C loop above it changes the slice, so each of the
    // 2 slices is refetched for every one of the 8 rows.
    let loops = vec![
        Loop { axis: Axis::FY, bound: 3 },
        Loop { axis: Axis::C, bound: 2 },
        Loop { axis: Axis::OY, bound: 8 },
    ];
    let view = NestView { shape: &shape, loops: &loops, spatial: &spatial };
    let cache = WindowCache::default();
    let once = shape.weight_bits();
    assert_eq!(view.fill_bits(OperandKind::Weight, 1, &cache), once * 8);
    assert_eq!(view.fill_bits(OperandKind::Weight, 2, &cache), once);
    assert_eq!(view.fill_bits(OperandKind::Weight, 3, &cache), once);
}

#[test]
fn time_batching_keeps_state_on_chip() {
    let (accel, shape) = micro_shape(4, 1, 1 << 20, 0);
    let (cost, _) = best_mapping(&accel, &shape).unwrap();
    assert_eq!(cost.dram_bits(), 0);
    assert_eq!(cost.bits_between(OperandKind::AccumulatorState, Loc::Pe, Loc::Level(2)), (0, 0));

    // States forced off-chip: batching all timesteps into one tile moves fewer state bits than
    // four single-timestep tiles.
    let state_dram = |tbatch: u64| -> u64 {
        let n_tiles = 4 / tbatch;
        (0..n_tiles as usize)
            .map(|i| {
                let (accel, shape) = micro_shape(tbatch, 1, 1 << 20, i);
                let shape = TileShape { placement: Placement { state: true, ..Default::default() }, ..shape };
                let (c, _) = best_mapping(&accel, &shape).unwrap();
                let (d, u) = c.bits_between(OperandKind::AccumulatorState, Loc::Level(2), Loc::Dram);
                d + u
            })
            .sum()
    };
    assert!(state_dram(4) < state_dram(1));
    assert_eq!(state_dram(4), 0);
}

#[test]
fn memo_counts_hits() {
    let w = micro_with(1, 8, 4, 4).unwrap();
    let g = generate_tile_graph(&w, &CutSpec::uniform(1, 4, 4)).unwrap();
    let mapper = Mapper::new(builtin_meta_vr(1 << 20).unwrap());
    let mid = [1, 2].map(|s| g.tile_at(1, s, 0));
    let a = mapper.map_tile(&w, &g.tiles[mid[0]], 0).unwrap();
    let b = mapper.map_tile(&w, &g.tiles[mid[1]], 0).unwrap();
    assert_eq!(a, b);
    let stats = mapper.stats();
    assert_eq!((stats.evaluations, stats.cache_hits), (1, 1));
}

#[test]
fn best_is_minimum_over_enumeration() {
    for (accel, shape) in [micro_shape(2, 2, 1 << 20, 1), conv_shape(POINTWISE, 1 << 20), conv_shape(BIG_WEIGHTS, 128 * 1024)] {
        let (best, count) = best_mapping(&accel, &shape).unwrap();
        let all = enumerate_mappings(&accel, &shape);
        assert_eq!(count as usize, all.len());
        let min = all.iter().map(|(n, _)| evaluate_nest(&accel, &shape, n).unwrap().energy_fj).min().unwrap();
        assert_eq!(best.energy_fj, min);
    }
}

#[test]
fn larger_buffers_never_cost_more() {
    let (accel, shape) = conv_shape(BIG_WEIGHTS, 128 * 1024);
    let base = best_mapping(&accel, &shape).unwrap().0.energy_fj;
    let mut bigger = accel.clone();
    for l in &mut bigger.cores[0].levels[..2] {
        l.capacity_bits *= 4;
    }
    assert!(best_mapping(&bigger, &shape).unwrap().0.energy_fj <= base);
    let mut gb = accel.clone();
    gb.cores[0].levels[2].capacity_bits *= 2;
    let shape2 = TileShape { gb_avail: shape.gb_avail * 2, ..shape.clone() };
    assert!(best_mapping(&gb, &shape2).unwrap().0.energy_fj <= base);
}

#[test]
fn multiset_permutation_count() {
    let l = |axis, bound| Loop { axis, bound };
    let items = [l(Axis::K, 2), l(Axis::K, 2), l(Axis::C, 3)];
    assert_eq!(multiset_permutations(&items).len(), 3);
    let items = [l(Axis::K, 2), l(Axis::OY, 2), l(Axis::C, 3), l(Axis::T, 2)];
    assert_eq!(multiset_permutations(&items).len(), 24);
}
