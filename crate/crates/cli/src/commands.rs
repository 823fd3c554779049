use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use anyhow::{Context, Result};
use rayon::prelude::*;
use stems_core::explorer::{fj_to_mj, hybrid_cuts, AllocationResult, GaConfig, GridOptions};
use stems_core::oracle::cross_check;
use stems_core::scheduler::scheduling_order;
use stems_core::workload::micro;
use stems_core::*;

use crate::config::{describe_cuts, BatchFrom, Loaded};

/// Exit status of a command that ran to completion.
pub enum Status {
    Ok,
    /// Validation or feasibility failure (exit 2).
    Failed(String),
}

fn write(dir: &Path, name: &str, body: &str) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    fs::write(&path, body).with_context(|| format!("writing {}", path.display()))
}

fn mj(fj: u64) -> String {
    if fj < 1_000_000_000 {
        format!("{:.3} nJ", fj as f64 / 1e6)
    } else {
        format!("{:.4} mJ", fj_to_mj(fj))
    }
}

fn mbit(bits: u64) -> String {
    format!("{:.3} Mbit", bits as f64 / 1e6)
}

fn stats_line(mapper: &Mapper) -> String {
    let s = mapper.stats();
    format!("mapper: {} shapes evaluated, {} memo hits, {} nests costed", s.evaluations, s.cache_hits, s.mappings)
}

pub fn cost(ctx: &Loaded, cuts: &CutSpec, out: &Path, stats: bool) -> Result<Status> {
    let w = &ctx.workload;
    let tg = generate_tile_graph(w, cuts)?;
    let mut csv = String::from("layer,block,class,tiles,ops,op_kind,energy_fj,latency_cycles,nest\n");
    let mut text = format!("{} on {} ({})\n", w.name, ctx.accel_label, describe_cuts(cuts));
    let _ = writeln!(text, "{:<16} {:>5} {:>6} {:>14} {:>4} {:>14} {:>14}  nest", "layer", "block", "tiles", "ops", "kind", "energy", "latency");
    for (op, node) in w.nodes.iter().enumerate() {
        if node.op_class == OpClass::InputSource {
            continue;
        }
        let (mut energy, mut latency, mut ops) = (0u64, 0u64, 0u64);
        let mut nest = String::new();
        for &t in &tg.op_tiles[op] {
            let cost = ctx.mapper.map_tile(w, &tg.tiles[t], 0)?;
            energy += cost.energy_fj;
            latency += cost.latency_cycles;
            ops += tg.tiles[t].ops;
            if nest.is_empty() {
                nest = cost.nest.describe();
            }
        }
        let kind = if node.op_class.has_weights() {
            if node.uses_sop() {
                "SOP"
            } else {
                "MAC"
            }
        } else {
            "elem"
        };
        let tiles = tg.op_tiles[op].len();
        let _ = writeln!(csv, "{},{},{},{tiles},{ops},{kind},{energy},{latency},\"{nest}\"", node.id, node.block_id, node.op_class.name());
        let _ = writeln!(text, "{:<16} {:>5} {tiles:>6} {ops:>14} {kind:>4} {:>14} {latency:>14}  {nest}", node.id, node.block_id, mj(energy));
    }
    if stats {
        let _ = writeln!(text, "{}", stats_line(&ctx.mapper));
    }
    write(out, "cost.csv", &csv)?;
    write(out, "cost.txt", &text)?;
    print!("{text}");
    Ok(Status::Ok)
}

fn summary_text(title: &str, res: &ScheduleResult) -> String {
    let mut s = format!("{title}\n");
    let mut row = |label: &str, value: String| {
        let _ = writeln!(s, "{label:<24}{value}");
    };
    row("total energy", format!("{} ({} fJ)", mj(res.energy_fj), res.energy_fj));
    row("latency", format!("{} cycles", res.latency_cycles));
    row("dram traffic", mbit(res.dram_bits));
    for class in [OperandClass::Weight, OperandClass::State, OperandClass::Feature] {
        row(&format!("  {}", class.name()), mbit(res.class_dram_bits(class)));
    }
    row("  network io features", mbit(res.io_feature_bits));
    for c in Component::ALL {
        row(&format!("energy {}", c.name()), mj(res.component_energy(c)));
    }
    row("oversized tiles", res.oversized_tiles.to_string());
    s
}

pub fn schedule_cmd(ctx: &Loaded, cuts: &CutSpec, seed: u64, out: &Path, stats: bool) -> Result<Status> {
    let w = &ctx.workload;
    let tg = generate_tile_graph(w, cuts)?;
    let opts = ScheduleOptions::default();
    let allocation: Option<AllocationResult> = if ctx.mapper.accel().cores.len() > 1 {
        Some(ga_allocate(w, &tg, &ctx.mapper, GaConfig { seed, ..Default::default() }, opts)?)
    } else {
        None
    };
    let alloc = allocation.as_ref().map_or_else(|| vec![0; w.nodes.len()], |a| a.allocation.clone());
    let res = match schedule(w, &tg, &ctx.mapper, &alloc, opts) {
        Ok(r) => r,
        Err(e @ (Error::Unschedulable { .. } | Error::UnknownCore { .. })) => return Ok(Status::Failed(e.to_string())),
        Err(e) => return Err(e.into()),
    };
    let mut text = summary_text(&format!("{} on {} ({})", w.name, ctx.accel_label, describe_cuts(cuts)), &res);
    if let Some(a) = &allocation {
        let _ = writeln!(text, "{:<24}{:?} ({} evaluations)", "allocation", a.allocation, a.evaluations);
    }
    if stats {
        let _ = writeln!(text, "{}", stats_line(&ctx.mapper));
    }
    write(out, "breakdown.csv", &res.breakdown_csv())?;
    write(out, "trace.jsonl", &res.trace_jsonl())?;
    write(out, "cuts.toml", &cuts.to_toml())?;
    write(out, "summary.txt", &text)?;
    print!("{text}");
    Ok(Status::Ok)
}

pub fn explore(ctx: &Loaded, batch_from: BatchFrom, band_rows: Option<u64>, out: &Path, stats: bool) -> Result<Status> {
    let w = &ctx.workload;
    let opts = GridOptions { direction: batch_from.into(), fused_band_rows: band_rows, ..Default::default() };
    let grid = hybrid_grid_explore(w, &ctx.mapper, opts);
    write(out, "heatmap_dram.csv", &grid.heatmap_csv(|s| s.dram_energy_fj))?;
    write(out, "heatmap_energy.csv", &grid.heatmap_csv(|s| s.energy_fj))?;
    write(out, "heatmap_latency.csv", &grid.heatmap_csv(|s| s.latency_cycles))?;
    write(out, "heatmap_dram_bits.csv", &grid.heatmap_csv(|s| s.dram_bits))?;

    let (Some(best), Some(base)) = (grid.best(), grid.baseline().summary()) else {
        return Ok(Status::Failed("no feasible baseline or grid point".into()));
    };
    let s = best.summary().unwrap();
    let cuts = hybrid_cuts(w, &grid.ranking, best.n_fused, best.n_batched, band_rows);
    let tg = generate_tile_graph(w, &cuts)?;
    let res = schedule(w, &tg, &ctx.mapper, &vec![0; w.nodes.len()], ScheduleOptions::default())?;

    let feasible = grid.points.iter().filter(|p| p.summary().is_some()).count();
    let mut text = format!(
        "{} on {}: {} points ({} feasible), batching from the {} side\n",
        w.name,
        ctx.accel_label,
        grid.points.len(),
        feasible,
        if grid.ranking.batch_from_output { "output" } else { "input" }
    );
    let _ = writeln!(text, "fusion order   {:?}", grid.ranking.fusion_order);
    let _ = writeln!(text, "batching order {:?}", grid.ranking.batch_order);
    let _ = writeln!(text, "baseline (0,0): {} total, {} DRAM, {}", mj(base.energy_fj), mj(base.dram_energy_fj), mbit(base.dram_bits));
    let _ = writeln!(
        text,
        "best ({},{}):    {} total, {} DRAM, {}",
        best.n_fused,
        best.n_batched,
        mj(s.energy_fj),
        mj(s.dram_energy_fj),
        mbit(s.dram_bits)
    );
    let _ = writeln!(text, "best cuts (bands x timesteps per block): {}", describe_cuts(&cuts));
    let _ = writeln!(
        text,
        "reduction: DRAM traffic {:.2}x, DRAM energy {:.2}x, total energy {:.2}x",
        base.dram_bits as f64 / s.dram_bits as f64,
        base.dram_energy_fj as f64 / s.dram_energy_fj as f64,
        base.energy_fj as f64 / s.energy_fj as f64
    );
    if stats {
        let _ = writeln!(text, "{}", stats_line(&ctx.mapper));
    }
    write(out, "best_cuts.toml", &cuts.to_toml())?;
    write(out, "breakdown.csv", &res.breakdown_csv())?;
    write(out, "trace.jsonl", &res.trace_jsonl())?;
    write(out, "summary.txt", &text)?;
    print!("{text}");
    Ok(Status::Ok)
}

pub fn sweep(ctx: &Loaded, factors: &[u64], out: &Path, stats: bool) -> Result<Status> {
    let w = &ctx.workload;
    let rows = time_batch_sweep(w, &ctx.mapper, factors, ScheduleOptions::default());
    let mut csv = String::from("factor,weight_bits,state_bits,feature_bits,intermediate_feature_bits,dram_bits,dram_energy_fj,energy_fj,latency_cycles\n");
    let mut text = format!("{} on {}: uniform layer-by-layer time batching\n", w.name, ctx.accel_label);
    let mut failed = None;
    for (f, r) in &rows {
        match r {
            Ok(s) => {
                let (wb, sb, fb) = (
                    s.class_dram_bits(OperandClass::Weight),
                    s.class_dram_bits(OperandClass::State),
                    s.class_dram_bits(OperandClass::Feature),
                );
                let _ = writeln!(
                    csv,
                    "{f},{wb},{sb},{fb},{},{},{},{},{}",
                    s.intermediate_feature_bits(),
                    s.dram_bits,
                    s.dram_energy_fj,
                    s.energy_fj,
                    s.latency_cycles
                );
                let _ = writeln!(
                    text,
                    "{f:>3}T  weights {:>16}  states {:>16}  features {:>16}  total {}",
                    mbit(wb),
                    mbit(sb),
                    mbit(fb),
                    mj(s.energy_fj)
                );
            }
            Err(e) => {
                let _ = writeln!(text, "{f:>3}T  infeasible: {e}");
                failed.get_or_insert_with(|| format!("factor {f}: {e}"));
            }
        }
    }
    if stats {
        let _ = writeln!(text, "{}", stats_line(&ctx.mapper));
    }
    write(out, "sweep.csv", &csv)?;
    write(out, "summary.txt", &text)?;
    print!("{text}");
    Ok(failed.map_or(Status::Ok, Status::Failed))
}

pub fn validate(orders: usize, seed: u64, out: &Path) -> Result<Status> {
    let mut configs = Vec::new();
    for k in [2, 3, 5] {
        let w = micro(k)?;
        let t = w.total_timesteps;
        for gb in [128 * 1024, 256] {
            for tb in [1, 2, t] {
                configs.push((format!("micro_{k} lbl tb{tb} GB {gb} B"), w.clone(), gb, CutSpec::uniform(k, 1, tb)));
                configs.push((format!("micro_{k} lf tb{tb} GB {gb} B"), w.clone(), gb, CutSpec::fused(&w, tb)));
            }
        }
    }
    let results: Vec<(String, Option<String>)> = configs
        .par_iter()
        .map(|(label, w, gb, cuts)| -> Result<(String, Option<String>)> {
            let mapper = Mapper::new(builtin_meta_vr(*gb)?);
            let tg = generate_tile_graph(w, cuts)?;
            let check = cross_check(w, &tg, &mapper, orders, seed)?;
            let mismatch = check
                .mismatch
                .or_else(|| (!check_inversions(w, &tg, seed)).then(|| "state-edge inversion accepted".to_string()));
            let line = match &mismatch {
                None => format!("ok   {label}: {} nests, {} replay, {} orders", check.nests, check.replays, check.orders),
                Some(m) => format!("FAIL {label}: {m}"),
            };
            Ok((line, mismatch.map(|m| format!("{label}: {m}"))))
        })
        .collect::<Result<_>>()?;
    let mut text = String::new();
    for (line, _) in &results {
        let _ = writeln!(text, "{line}");
    }
    write(out, "validate.txt", &text)?;
    print!("{text}");
    Ok(results.into_iter().find_map(|(_, m)| m).map_or(Status::Ok, Status::Failed))
}

/// A few state-edge inversions of the scheduler order must all be rejected.
fn check_inversions(w: &WorkloadGraph, tg: &TileGraph, seed: u64) -> bool {
    let mut r = stems_core::oracle::rng(seed ^ 0x5eed);
    let order = scheduling_order(w, tg);
    (0..4).all(|i| match stems_core::oracle::invert_state_edge(&order, tg, &mut r) {
        Some(bad) => !functional_check(w, tg, &bad, seed.wrapping_add(i)),
        None => true,
    })
}
