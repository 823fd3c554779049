//! Intra-tile mapping search: loop-order permutations over merged prime
//! factors, greedy or enumerated residency depths per memory level, and
//! minimum-energy selection with a shared memo.

mod cost;
mod shape;

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

pub use cost::{
    access_counts, allocation, estimate_cost, level_capacity, Access, EnergyEntry, Loc, LoopNest, MappingCost, NestView,
    Residency, WindowCache,
};
#[cfg(test)]
mod tests;

pub use shape::{
    largest_divisor_at_most, prime_factorize, spatial_unrolling, temporal_loops, window_sums, Loop, Placement, TileShape,
    LPF_LIMIT, PSUM_BITS,
};

use crate::accelerator::{AcceleratorModel, LevelId};
use crate::tilegraph::ComputationTile;
use crate::workload::{Axis, OperandKind, WorkloadGraph};
use crate::{Error, Result};

/// Storage chain of an operand, PE first, ending at the global buffer or DRAM.
pub fn operand_chain(accel: &AcceleratorModel, shape: &TileShape, kind: OperandKind) -> Vec<Loc> {
    let core = &accel.cores[shape.core];
    let mut chain = vec![Loc::Pe];
    chain.extend(core.chain(kind).into_iter().map(Loc::Level));
    if shape.placement.off_chip(kind) {
        chain.push(Loc::Dram);
    }
    chain
}

/// All distinct orderings of `items` (multiset permutations).
fn multiset_permutations(items: &[Loop]) -> Vec<Vec<Loop>> {
    let mut sorted = items.to_vec();
    sorted.sort();
    let mut out = Vec::new();
    let mut used = vec![false; sorted.len()];
    let mut cur = Vec::with_capacity(sorted.len());
    fn rec(sorted: &[Loop], used: &mut [bool], cur: &mut Vec<Loop>, out: &mut Vec<Vec<Loop>>) {
        if cur.len() == sorted.len() {
            out.push(cur.clone());
            return;
        }
        for i in 0..sorted.len() {
            if used[i] || (i > 0 && sorted[i] == sorted[i - 1] && !used[i - 1]) {
                continue;
            }
            used[i] = true;
            cur.push(sorted[i]);
            rec(sorted, used, cur, out);
            cur.pop();
            used[i] = false;
        }
    }
    rec(&sorted, &mut used, &mut cur, &mut out);
    out
}

/// Candidate loop orders for a shape, innermost first. Kernel loops are
/// always innermost; for stateful tiles the input-channel loops sit directly
/// above them so every neuron finishes a timestep before the next starts.
pub fn loop_orders(shape: &TileShape, spatial: &[(Axis, u64)]) -> Vec<Vec<Loop>> {
    let (inner, free) = temporal_loops(shape, spatial);
    let (mut fixed, rest): (Vec<Loop>, Vec<Loop>) = if shape.stateful {
        free.into_iter().partition(|l| l.axis == Axis::C)
    } else {
        (Vec::new(), free)
    };
    fixed.sort();
    let mut head = inner;
    head.extend(fixed);
    multiset_permutations(&rest)
        .into_iter()
        .map(|p| {
            let mut v = head.clone();
            v.extend(p);
            v
        })
        .collect()
}

fn level_height(accel: &AcceleratorModel, core: usize, mut i: usize) -> usize {
    let levels = &accel.cores[core].levels;
    let mut h = 0;
    while let LevelId::Level(next) = levels[i].above {
        i = next;
        h += 1;
    }
    h
}

struct Slot {
    op: usize,
    pos: usize,
    level: usize,
}

/// Visits every valid (nest, residency, allocation) of a shape.
fn search<F>(accel: &AcceleratorModel, shape: &TileShape, mut visit: F)
where
    F: FnMut(&NestView, &[Residency], Vec<(Loc, u64)>),
{
    let core = &accel.cores[shape.core];
    let spatial = spatial_unrolling(shape, &core.pe);
    let cache = WindowCache::default();
    let kinds = shape.operands();
    let chains: Vec<Vec<Loc>> = kinds.iter().map(|&k| operand_chain(accel, shape, k)).collect();
    let mut slots: Vec<Slot> = Vec::new();
    for (op, chain) in chains.iter().enumerate() {
        for pos in 1..chain.len() - 1 {
            if let Loc::Level(level) = chain[pos] {
                slots.push(Slot { op, pos, level });
            }
        }
    }
    slots.sort_by_key(|s| (std::cmp::Reverse(level_height(accel, shape.core, s.level)), s.level, s.op));
    let tops: Vec<Loc> = chains.iter().map(|c| *c.last().unwrap()).collect();

    for loops in loop_orders(shape, &spatial) {
        let view = NestView { shape, loops: &loops, spatial: &spatial };
        let n = loops.len();
        let acc_run = view.innermost_run(shape.accumulator());
        let last_reduction = loops.iter().rposition(|l| !shape.relevant(OperandKind::OutputFeature, l.axis)).map_or(0, |i| i + 1);
        let mut residency: Vec<Residency> = kinds
            .iter()
            .zip(&chains)
            .map(|(&kind, chain)| {
                let d0 = match kind {
                    OperandKind::Weight | OperandKind::InputFeature => 0,
                    _ => acc_run,
                };
                let levels = chain.iter().enumerate().map(|(j, &loc)| (loc, if j + 1 == chain.len() { n } else { d0 })).collect();
                Residency { kind, levels }
            })
            .collect();
        assign(accel, &view, &slots, &tops, 0, &mut residency, last_reduction, &cache, &mut visit);
    }
}

#[allow(clippy::too_many_arguments)]
fn assign<F>(
    accel: &AcceleratorModel,
    view: &NestView,
    slots: &[Slot],
    tops: &[Loc],
    idx: usize,
    residency: &mut Vec<Residency>,
    last_reduction: usize,
    cache: &WindowCache,
    visit: &mut F,
) where
    F: FnMut(&NestView, &[Residency], Vec<(Loc, u64)>),
{
    let shape = view.shape;
    if idx == slots.len() {
        if let Some(alloc) = allocation(accel, view, residency, cache) {
            visit(view, residency, alloc);
        }
        return;
    }
    let slot = &slots[idx];
    let kind = residency[slot.op].kind;
    let n = view.loops.len();
    let lower = residency[slot.op].levels[slot.pos - 1].1;
    if kind == OperandKind::OutputFeature && shape.stateful {
        residency[slot.op].levels[slot.pos].1 = lower;
        assign(accel, view, slots, tops, idx + 1, residency, last_reduction, cache, visit);
        return;
    }
    let lb = if kind == OperandKind::OutputFeature { lower.max(last_reduction) } else { lower };
    let candidates: Vec<usize> =
        (lb..=n).filter(|&d| d == lb || d == n || shape.relevant(kind, view.loops[d - 1].axis)).collect();
    let shared = slots.iter().filter(|s| s.level == slot.level).count() > 1 || tops.contains(&Loc::Level(slot.level));
    if shared {
        for d in candidates {
            residency[slot.op].levels[slot.pos].1 = d;
            assign(accel, view, slots, tops, idx + 1, residency, last_reduction, cache, visit);
        }
    } else {
        let cap = level_capacity(accel, shape, slot.level);
        let below = view.visits(kind, lower);
        if let Some(&d) = candidates.iter().rev().find(|&&d| view.footprint_bits(kind, d, below, cache) <= cap) {
            residency[slot.op].levels[slot.pos].1 = d;
            assign(accel, view, slots, tops, idx + 1, residency, last_reduction, cache, visit);
        }
    }
}

/// Every valid mapping of a shape with its per-level allocation.
pub fn enumerate_mappings(accel: &AcceleratorModel, shape: &TileShape) -> Vec<(LoopNest, Vec<(Loc, u64)>)> {
    let mut out = Vec::new();
    search(accel, shape, |view, res, alloc| {
        out.push((
            LoopNest { loops: view.loops.to_vec(), spatial: view.spatial.to_vec(), residency: res.to_vec() },
            alloc,
        ));
    });
    out
}

/// Access counts and cost of an explicit nest, or `None` if it does not fit.
pub fn evaluate_nest(accel: &AcceleratorModel, shape: &TileShape, nest: &LoopNest) -> Option<MappingCost> {
    let cache = WindowCache::default();
    let view = NestView { shape, loops: &nest.loops, spatial: &nest.spatial };
    let alloc = allocation(accel, &view, &nest.residency, &cache)?;
    let accesses = access_counts(&view, &nest.residency, &cache);
    Some(estimate_cost(accel, &view, &nest.residency, accesses, alloc))
}

fn better(a: &MappingCost, b: &MappingCost) -> bool {
    (a.energy_fj, a.latency_cycles, &a.nest.loops) < (b.energy_fj, b.latency_cycles, &b.nest.loops)
}

/// Minimum-energy mapping of a shape (ties: latency, then loop order).
pub fn best_mapping(accel: &AcceleratorModel, shape: &TileShape) -> Result<(MappingCost, u64)> {
    let cache = WindowCache::default();
    let mut best: Option<MappingCost> = None;
    let mut count = 0u64;
    search(accel, shape, |view, res, alloc| {
        count += 1;
        let accesses = access_counts(view, res, &cache);
        let cost = estimate_cost(accel, view, res, accesses, alloc);
        if best.as_ref().map_or(true, |b| better(&cost, b)) {
            best = Some(cost);
        }
    });
    best.map(|b| (b, count)).ok_or_else(|| Error::Internal(format!("no valid mapping for tile shape {shape:?}")))
}

/// Moves the largest operand groups to DRAM until the rest fits `capacity`.
pub fn plan_placement(shape: &TileShape, capacity: u64) -> Placement {
    let mut placement = Placement::default();
    let mut groups: Vec<(u64, OperandKind)> = shape.operands().into_iter().map(|k| (shape.group_bits(k), k)).collect();
    groups.sort_by_key(|&(bits, k)| (std::cmp::Reverse(bits), k as u8));
    for (_, kind) in groups {
        if shape.resident_bits(placement) <= capacity {
            break;
        }
        placement.set(kind);
    }
    placement
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct MapperStats {
    pub evaluations: u64,
    pub cache_hits: u64,
    pub mappings: u64,
}

/// Memoized mapping search shared across threads.
pub struct Mapper {
    accel: AcceleratorModel,
    memo: RwLock<HashMap<TileShape, Arc<MappingCost>>>,
    evaluations: AtomicU64,
    cache_hits: AtomicU64,
    mappings: AtomicU64,
}

impl Mapper {
    pub fn new(accel: AcceleratorModel) -> Self {
        Mapper {
            accel,
            memo: RwLock::new(HashMap::new()),
            evaluations: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            mappings: AtomicU64::new(0),
        }
    }

    pub fn accel(&self) -> &AcceleratorModel {
        &self.accel
    }

    pub fn map(&self, shape: &TileShape) -> Result<Arc<MappingCost>> {
        if let Some(hit) = self.memo.read().unwrap().get(shape) {
            self.cache_hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit.clone());
        }
        let (cost, count) = best_mapping(&self.accel, shape)?;
        self.evaluations.fetch_add(1, Ordering::Relaxed);
        self.mappings.fetch_add(count, Ordering::Relaxed);
        let cost = Arc::new(cost);
        Ok(self.memo.write().unwrap().entry(shape.clone()).or_insert(cost).clone())
    }

    /// Maps a tile on its own: the whole global buffer is available and groups
    /// that do not fit are served from DRAM.
    pub fn map_tile(&self, w: &WorkloadGraph, tile: &ComputationTile, core: usize) -> Result<Arc<MappingCost>> {
        let cap = self.accel.cores[core].global_capacity_bits();
        let probe = TileShape::from_tile(w, tile, Placement::default(), cap, core)?;
        let placement = plan_placement(&probe, cap);
        let shape = TileShape { placement, ..probe };
        self.map(&shape)
    }

    pub fn stats(&self) -> MapperStats {
        MapperStats {
            evaluations: self.evaluations.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            mappings: self.mappings.load(Ordering::Relaxed),
        }
    }

    pub fn cache_len(&self) -> usize {
        self.memo.read().unwrap().len()
    }
}
