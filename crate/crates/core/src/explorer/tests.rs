use super::*;
use crate::accelerator::{builtin_meta_vr, parse_accelerator};
use crate::workload::{builtin_benchmark, micro, micro_with, parse_workload};

const TWO_CORES: &str = include_str!("../../../../configs/two_core_mesh.toml");

const TWIN_LAYERS: &str = r#"
timesteps = 2
[[layers]]
id = "in"
class = "input"
channels = 16
height = 32
width = 32
[[layers]]
id = "a"
class = "conv2d"
inputs = ["in"]
out_channels = 64
kernel = 3
padding = 1
stateful = true
[[layers]]
id = "b"
class = "conv2d"
inputs = ["in"]
out_channels = 64
kernel = 3
padding = 1
stateful = true
"#;

#[test]
fn ranking_directions() {
    let red = rank_blocks(&builtin_benchmark("red_lif").unwrap(), BatchDirection::Auto);
    assert!(red.batch_from_output);
    assert_eq!(red.batch_order, (0..8).rev().collect::<Vec<_>>());
    assert_eq!(red.fusion_order, (0..8).collect::<Vec<_>>());
    let sew = rank_blocks(&builtin_benchmark("sew_resnet18").unwrap(), BatchDirection::Auto);
    assert!(!sew.batch_from_output);
    let one = rank_blocks(&micro_with(1, 8, 4, 2).unwrap(), BatchDirection::Auto);
    assert_eq!((one.fusion_order.clone(), one.batch_order.clone()), (vec![0], vec![0]));
    assert!(rank_blocks(&micro(3).unwrap(), BatchDirection::FromOutput).batch_from_output);
}

#[test]
fn grid_corners_are_canonical_schedules() {
    let w = micro(3).unwrap();
    let mapper = Mapper::new(builtin_meta_vr(1 << 20).unwrap());
    let grid = hybrid_grid_explore(&w, &mapper, GridOptions::default());
    assert_eq!(grid.points.len(), 16);
    let alloc = vec![0; w.nodes.len()];
    let run = |cuts: CutSpec| PointSummary::of(&schedule(&w, &generate_tile_graph(&w, &cuts).unwrap(), &mapper, &alloc, ScheduleOptions::default()).unwrap());
    assert_eq!(grid.baseline().summary().unwrap(), &run(CutSpec::st_lbl(&w)));
    assert_eq!(grid.point(3, 3).summary().unwrap(), &run(CutSpec::fused(&w, w.total_timesteps)));
    let best = grid.best().unwrap().summary().unwrap();
    assert!(best.energy_fj <= grid.baseline().summary().unwrap().energy_fj);
    let csv = grid.heatmap_csv(|s| fj_to_mj(s.dram_energy_fj));
    assert_eq!(csv.lines().count(), 5);
    assert!(csv.lines().all(|l| l.split(',').count() == 5));
}

#[test]
fn single_block_grid_has_four_points() {
    let w = micro_with(1, 8, 4, 2).unwrap();
    let mapper = Mapper::new(builtin_meta_vr(1 << 20).unwrap());
    let grid = hybrid_grid_explore(&w, &mapper, GridOptions::default());
    assert_eq!(grid.points.len(), 4);
    assert!(grid.points.iter().all(|p| p.summary().is_some()));
}

#[test]
fn sweep_factor_one_is_baseline() {
    let w = micro(2).unwrap();
    let mapper = Mapper::new(builtin_meta_vr(256).unwrap());
    let sweep = time_batch_sweep(&w, &mapper, &[1, 2, 4, 99], ScheduleOptions::default());
    assert_eq!(sweep.iter().map(|s| s.0).collect::<Vec<_>>(), vec![1, 2, 4, 4]);
    let base = schedule(&w, &generate_tile_graph(&w, &CutSpec::st_lbl(&w)).unwrap(), &mapper, &[0, 0, 0], ScheduleOptions::default()).unwrap();
    assert_eq!(sweep[0].1.as_ref().unwrap(), &PointSummary::of(&base));
}

#[test]
fn single_core_bypasses_ga() {
    let w = micro(2).unwrap();
    let tg = generate_tile_graph(&w, &CutSpec::st_lbl(&w)).unwrap();
    let mapper = Mapper::new(builtin_meta_vr(1 << 20).unwrap());
    let r = ga_allocate(&w, &tg, &mapper, GaConfig::default(), ScheduleOptions::default()).unwrap();
    assert_eq!(r.allocation, vec![0; 3]);
    assert_eq!(r.evaluations, 1);
}

#[test]
fn independent_layers_go_to_distinct_cores() {
    let w = parse_workload(TWIN_LAYERS).unwrap();
    let tg = generate_tile_graph(&w, &CutSpec::tb_lbl(&w)).unwrap();
    let mapper = Mapper::new(parse_accelerator(TWO_CORES).unwrap());
    let ex = exhaustive_allocate(&w, &tg, &mapper, ScheduleOptions::default()).unwrap();
    assert_ne!(ex.allocation[1], ex.allocation[2]);
    let ga = ga_allocate(&w, &tg, &mapper, GaConfig { seed: 5, ..Default::default() }, ScheduleOptions::default()).unwrap();
    assert_eq!(ga.allocation, ex.allocation);
}

#[test]
fn ga_matches_exhaustive_and_is_deterministic() {
    let w = micro_with(3, 16, 8, 2).unwrap();
    let tg = generate_tile_graph(&w, &CutSpec::st_lbl(&w)).unwrap();
    let mapper = Mapper::new(parse_accelerator(TWO_CORES).unwrap());
    let ex = exhaustive_allocate(&w, &tg, &mapper, ScheduleOptions::default()).unwrap();
    let cfg = GaConfig { seed: 11, ..Default::default() };
    let a = ga_allocate(&w, &tg, &mapper, cfg, ScheduleOptions::default()).unwrap();
    let b = ga_allocate(&w, &tg, &mapper, cfg, ScheduleOptions::default()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.allocation, ex.allocation);
    assert_eq!(a.fitness, ex.fitness);
}
