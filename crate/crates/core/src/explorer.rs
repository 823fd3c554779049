//! Inter-layer schedule search: the (N+1)^2 hybrid grid of layer fusion and
//! time batching, uniform time-batch sweeps, and multi-core allocation by a
//! seeded genetic algorithm.

use std::collections::{BTreeMap, HashMap};
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::intramap::Mapper;
use crate::scheduler::{schedule, Component, OperandClass, ScheduleOptions, ScheduleResult};
use crate::tilegraph::{generate_tile_graph, CutSpec, TileGraph};
use crate::workload::{OpClass, WorkloadGraph};
use crate::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum BatchDirection {
    /// Output side if the first block holds no neuron state, input side otherwise.
    #[default]
    Auto,
    FromInput,
    FromOutput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BlockRanking {
    pub fusion_order: Vec<usize>,
    pub batch_order: Vec<usize>,
    pub batch_from_output: bool,
}

/// Fusion always proceeds from the input side; batching from the side given
/// by `direction`.
pub fn rank_blocks(w: &WorkloadGraph, direction: BatchDirection) -> BlockRanking {
    let n = w.n_blocks();
    let fusion_order: Vec<usize> = (0..n).collect();
    let first_stateful = w.block_nodes(0).any(|i| w.nodes[i].stateful);
    let from_output = match direction {
        BatchDirection::Auto => !first_stateful,
        BatchDirection::FromInput => false,
        BatchDirection::FromOutput => true,
    };
    let batch_order = if from_output { (0..n).rev().collect() } else { (0..n).collect() };
    BlockRanking { fusion_order, batch_order, batch_from_output: from_output }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PointSummary {
    pub dram_energy_fj: u64,
    pub energy_fj: u64,
    pub latency_cycles: u64,
    pub dram_bits: u64,
    pub dram_bits_by_class: BTreeMap<OperandClass, u64>,
    pub io_feature_bits: u64,
    pub oversized_tiles: usize,
}

impl PointSummary {
    pub fn of(r: &ScheduleResult) -> Self {
        PointSummary {
            dram_energy_fj: r.component_energy(Component::Dram),
            energy_fj: r.energy_fj,
            latency_cycles: r.latency_cycles,
            dram_bits: r.dram_bits,
            dram_bits_by_class: r.dram_bits_by_class.clone(),
            io_feature_bits: r.io_feature_bits,
            oversized_tiles: r.oversized_tiles,
        }
    }

    pub fn class_dram_bits(&self, class: OperandClass) -> u64 {
        self.dram_bits_by_class.get(&class).copied().unwrap_or(0)
    }

    pub fn intermediate_feature_bits(&self) -> u64 {
        self.class_dram_bits(OperandClass::Feature) - self.io_feature_bits
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HybridPoint {
    pub n_fused: usize,
    pub n_batched: usize,
    pub cuts: CutSpec,
    /// `Err` holds the scheduler's message for infeasible points.
    pub outcome: std::result::Result<PointSummary, String>,
}

impl HybridPoint {
    pub fn summary(&self) -> Option<&PointSummary> {
        self.outcome.as_ref().ok()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct GridOptions {
    pub direction: BatchDirection,
    /// Rows per band in fused blocks; `None` for one band per output row.
    pub fused_band_rows: Option<u64>,
    pub schedule: ScheduleOptions,
}

#[derive(Debug, Clone)]
pub struct HybridGrid {
    pub n_blocks: usize,
    pub ranking: BlockRanking,
    /// Row-major by `n_fused`, then `n_batched`.
    pub points: Vec<HybridPoint>,
}

impl HybridGrid {
    pub fn point(&self, n_fused: usize, n_batched: usize) -> &HybridPoint {
        &self.points[n_fused * (self.n_blocks + 1) + n_batched]
    }

    pub fn baseline(&self) -> &HybridPoint {
        self.point(0, 0)
    }

    /// Feasible point with the lowest total energy (ties: lower DRAM energy, then grid position).
    pub fn best(&self) -> Option<&HybridPoint> {
        self.points
            .iter()
            .filter_map(|p| p.summary().map(|s| (s.energy_fj, s.dram_energy_fj, p.n_fused, p.n_batched, p)))
            .min_by_key(|&(e, d, f, b, _)| (e, d, f, b))
            .map(|t| t.4)
    }

    /// Heatmap CSV, rows `n_fused`, columns `n_batched`; empty cells are infeasible.
    pub fn heatmap_csv<T: std::fmt::Display>(&self, value: impl Fn(&PointSummary) -> T) -> String {
        let n = self.n_blocks;
        let mut out = String::from("n_fused");
        for b in 0..=n {
            out.push_str(&format!(",b{b}"));
        }
        out.push('\n');
        for f in 0..=n {
            out.push_str(&f.to_string());
            for b in 0..=n {
                match self.point(f, b).summary() {
                    Some(s) => out.push_str(&format!(",{}", value(s))),
                    None => out.push(','),
                }
            }
            out.push('\n');
        }
        out
    }
}

/// Femtojoules to millijoules.
pub fn fj_to_mj(fj: u64) -> f64 {
    fj as f64 * 1e-12
}

/// Cuts of grid point (`n_fused`, `n_batched`).
pub fn hybrid_cuts(w: &WorkloadGraph, ranking: &BlockRanking, n_fused: usize, n_batched: usize, band_rows: Option<u64>) -> CutSpec {
    let n = w.n_blocks();
    let mut cuts = CutSpec::st_lbl(w);
    for &b in &ranking.fusion_order[..n_fused] {
        let rows = CutSpec::max_spatial(w, b);
        cuts.spatial[b] = band_rows.map_or(rows, |r| rows.div_ceil(r.max(1)).max(1));
    }
    for &b in &ranking.batch_order[..n_batched] {
        cuts.temporal[b] = w.total_timesteps;
    }
    debug_assert_eq!(cuts.n_blocks(), n);
    cuts
}

fn run_point(w: &WorkloadGraph, mapper: &Mapper, cuts: &CutSpec, allocation: &[usize], opts: ScheduleOptions) -> std::result::Result<PointSummary, String> {
    let tg = generate_tile_graph(w, cuts).map_err(|e| e.to_string())?;
    schedule(w, &tg, mapper, allocation, opts).map(|r| PointSummary::of(&r)).map_err(|e| e.to_string())
}

/// Evaluates all (N+1)^2 points on core 0. Infeasible points are kept with
/// their error.
pub fn hybrid_grid_explore(w: &WorkloadGraph, mapper: &Mapper, opts: GridOptions) -> HybridGrid {
    let n = w.n_blocks();
    let ranking = rank_blocks(w, opts.direction);
    let allocation = vec![0; w.nodes.len()];
    let coords: Vec<(usize, usize)> = (0..=n).flat_map(|f| (0..=n).map(move |b| (f, b))).collect();
    let points = coords
        .par_iter()
        .map(|&(f, b)| {
            let cuts = hybrid_cuts(w, &ranking, f, b, opts.fused_band_rows);
            let outcome = run_point(w, mapper, &cuts, &allocation, opts.schedule);
            if let Err(e) = &outcome {
                log::warn!("grid point ({f}, {b}) infeasible: {e}");
            }
            HybridPoint { n_fused: f, n_batched: b, cuts, outcome }
        })
        .collect();
    HybridGrid { n_blocks: n, ranking, points }
}

/// Uniform time batching (layer by layer) for each factor, clamped to `1..=T`.
pub fn time_batch_sweep(w: &WorkloadGraph, mapper: &Mapper, factors: &[u64], opts: ScheduleOptions) -> Vec<(u64, std::result::Result<PointSummary, String>)> {
    let allocation = vec![0; w.nodes.len()];
    factors
        .par_iter()
        .map(|&f| {
            let f = f.clamp(1, w.total_timesteps);
            (f, run_point(w, mapper, &CutSpec::uniform(w.n_blocks(), 1, f), &allocation, opts))
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaConfig {
    pub population: usize,
    pub generations: usize,
    /// Per-gene mutation probability; `None` for 1 / #genes.
    pub mutation_rate: Option<f64>,
    pub tournament: usize,
    pub seed: u64,
}

impl Default for GaConfig {
    fn default() -> Self {
        GaConfig { population: 32, generations: 50, mutation_rate: None, tournament: 2, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationResult {
    /// Core of every operator (input sources stay on core 0).
    pub allocation: Vec<usize>,
    pub fitness: f64,
    pub summary: PointSummary,
    pub evaluations: usize,
}

/// Scalar fitness `energy + lambda * latency`, with lambda set so both terms
/// are equal on the all-on-core-0 allocation.
struct Fitness<'a> {
    w: &'a WorkloadGraph,
    tg: &'a TileGraph,
    mapper: &'a Mapper,
    opts: ScheduleOptions,
    genes: Vec<usize>,
    lambda: f64,
    memo: Mutex<HashMap<Vec<usize>, Option<(f64, PointSummary)>>>,
}

impl<'a> Fitness<'a> {
    fn new(w: &'a WorkloadGraph, tg: &'a TileGraph, mapper: &'a Mapper, opts: ScheduleOptions) -> Result<Self> {
        let genes: Vec<usize> = (0..w.nodes.len()).filter(|&i| w.nodes[i].op_class != OpClass::InputSource).collect();
        let base = PointSummary::of(&schedule(w, tg, mapper, &vec![0; w.nodes.len()], opts)?);
        let lambda = base.energy_fj as f64 / base.latency_cycles.max(1) as f64;
        Ok(Fitness { w, tg, mapper, opts, genes, lambda, memo: Mutex::new(HashMap::new()) })
    }

    fn allocation(&self, chromosome: &[usize]) -> Vec<usize> {
        let mut a = vec![0; self.w.nodes.len()];
        for (&op, &core) in self.genes.iter().zip(chromosome) {
            a[op] = core;
        }
        a
    }

    fn eval(&self, chromosome: &[usize]) -> Option<(f64, PointSummary)> {
        if let Some(v) = self.memo.lock().unwrap().get(chromosome) {
            return v.clone();
        }
        let v = schedule(self.w, self.tg, self.mapper, &self.allocation(chromosome), self.opts).ok().map(|r| {
            let s = PointSummary::of(&r);
            (s.energy_fj as f64 + self.lambda * s.latency_cycles as f64, s)
        });
        self.memo.lock().unwrap().insert(chromosome.to_vec(), v.clone());
        v
    }

    fn score(&self, chromosome: &[usize]) -> f64 {
        self.eval(chromosome).map_or(f64::INFINITY, |(f, _)| f)
    }

    fn result(&self, chromosome: &[usize]) -> Option<AllocationResult> {
        let (fitness, summary) = self.eval(chromosome)?;
        let evaluations = self.memo.lock().unwrap().len();
        Some(AllocationResult { allocation: self.allocation(chromosome), fitness, summary, evaluations })
    }
}

fn better(a: (f64, &[usize]), b: (f64, &[usize])) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

/// Seeded generational GA over operator-to-core vectors: tournament
/// selection, single-point crossover, per-gene mutation, one elite.
/// A single-core model returns the identity allocation.
pub fn ga_allocate(w: &WorkloadGraph, tg: &TileGraph, mapper: &Mapper, config: GaConfig, opts: ScheduleOptions) -> Result<AllocationResult> {
    let n_cores = mapper.accel().cores.len();
    let fit = Fitness::new(w, tg, mapper, opts)?;
    let n_genes = fit.genes.len();
    if n_cores == 1 || n_genes == 0 {
        return Ok(fit.result(&vec![0; n_genes]).expect("baseline schedule succeeded"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let rate = config.mutation_rate.unwrap_or(1.0 / n_genes as f64);
    let pop_size = config.population.max(2);
    let mut pop: Vec<Vec<usize>> = vec![vec![0; n_genes]];
    while pop.len() < pop_size {
        pop.push((0..n_genes).map(|_| rng.gen_range(0..n_cores)).collect());
    }
    let mut best: (f64, Vec<usize>) = (f64::INFINITY, pop[0].clone());
    for gen in 0..=config.generations {
        let scores: Vec<f64> = pop.par_iter().map(|c| fit.score(c)).collect();
        for (c, &s) in pop.iter().zip(&scores) {
            if better((s, c), (best.0, &best.1)) {
                best = (s, c.clone());
            }
        }
        if gen == config.generations {
            break;
        }
        let pick = |rng: &mut ChaCha8Rng| -> usize {
            let mut winner = rng.gen_range(0..pop.len());
            for _ in 1..config.tournament.max(1) {
                let c = rng.gen_range(0..pop.len());
                if better((scores[c], &pop[c]), (scores[winner], &pop[winner])) {
                    winner = c;
                }
            }
            winner
        };
        let mut next = vec![best.1.clone()];
        while next.len() < pop_size {
            let (a, b) = (pick(&mut rng), pick(&mut rng));
            let cut = if n_genes > 1 { rng.gen_range(1..n_genes) } else { 0 };
            let mut child: Vec<usize> = pop[a][..cut].iter().chain(&pop[b][cut..]).copied().collect();
            for g in &mut child {
                if rng.gen_bool(rate.clamp(0.0, 1.0)) {
                    *g = rng.gen_range(0..n_cores);
                }
            }
            next.push(child);
        }
        pop = next;
    }
    fit.result(&best.1).ok_or_else(|| crate::Error::Internal("no feasible allocation found".into()))
}

/// Evaluates every operator-to-core vector. Exponential; for small models only.
pub fn exhaustive_allocate(w: &WorkloadGraph, tg: &TileGraph, mapper: &Mapper, opts: ScheduleOptions) -> Result<AllocationResult> {
    let fit = Fitness::new(w, tg, mapper, opts)?;
    let n_cores = mapper.accel().cores.len();
    let n_genes = fit.genes.len() as u32;
    let total = n_cores.pow(n_genes);
    let all: Vec<Vec<usize>> = (0..total)
        .map(|mut i| {
            (0..n_genes)
                .map(|_| {
                    let g = i % n_cores;
                    i /= n_cores;
                    g
                })
                .collect()
        })
        .collect();
    let scores: Vec<f64> = all.par_iter().map(|c| fit.score(c)).collect();
    let mut best = 0;
    for i in 1..all.len() {
        if better((scores[i], &all[i]), (scores[best], &all[best])) {
            best = i;
        }
    }
    fit.result(&all[best]).ok_or_else(|| crate::Error::Internal("no feasible allocation found".into()))
}

#[cfg(test)]
mod tests;
