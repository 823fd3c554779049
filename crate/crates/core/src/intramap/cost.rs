//! Analytical access counts, energy and latency of one loop nest.

use std::cell::RefCell;
use std::collections::HashMap;

use super::shape::{window_sums, Loop, TileShape, PSUM_BITS};
use crate::accelerator::AcceleratorModel;
use crate::workload::{Axis, OperandKind};

/// Storage location: PE registers, an on-chip level of the core, or DRAM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Loc {
    Pe,
    Level(usize),
    Dram,
}

/// Where an operand lives at each loop depth: `(location, depth)` pairs from
/// the PE upwards. A level at depth `d` holds the operand's working set for
/// loops `0..d`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Residency {
    pub kind: OperandKind,
    pub levels: Vec<(Loc, usize)>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LoopNest {
    /// Temporal loops, innermost first.
    pub loops: Vec<Loop>,
    pub spatial: Vec<(Axis, u64)>,
    pub residency: Vec<Residency>,
}

impl LoopNest {
    pub fn iterations(&self) -> u64 {
        self.loops.iter().map(|l| l.bound).product()
    }

    pub fn residency(&self, kind: OperandKind) -> Option<&Residency> {
        self.residency.iter().find(|r| r.kind == kind)
    }

    /// Compact text form, innermost loop first, e.g. `FX3 FY3 C4 | K32 OX16`.
    pub fn describe(&self) -> String {
        let loops: Vec<String> = self.loops.iter().map(|l| format!("{}{}", l.axis.name(), l.bound)).collect();
        let spatial: Vec<String> = self.spatial.iter().map(|(a, u)| format!("{}{}", a.name(), u)).collect();
        format!("{} | {}", loops.join(" "), spatial.join(" "))
    }
}

/// Bits crossing one boundary for one operand: `down` fills the lower level,
/// `up` writes back to the upper one.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Access {
    pub operand: OperandKind,
    pub lower: Loc,
    pub upper: Loc,
    pub down_bits: u64,
    pub up_bits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EnergyEntry {
    pub loc: Loc,
    /// `None` for compute.
    pub operand: Option<OperandKind>,
    pub fj: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MappingCost {
    pub energy_fj: u64,
    pub breakdown: Vec<EnergyEntry>,
    pub latency_cycles: u64,
    pub compute_cycles: u64,
    pub memory_bound: bool,
    pub accesses: Vec<Access>,
    pub nest: LoopNest,
    /// Bits allocated per on-chip level.
    pub allocation: Vec<(Loc, u64)>,
}

impl MappingCost {
    pub fn dram_bits(&self) -> u64 {
        self.accesses.iter().filter(|a| a.upper == Loc::Dram).map(|a| a.down_bits + a.up_bits).sum()
    }

    pub fn bits_between(&self, kind: OperandKind, lower: Loc, upper: Loc) -> (u64, u64) {
        self.accesses
            .iter()
            .filter(|a| a.operand == kind && a.lower == lower && a.upper == upper)
            .fold((0, 0), |(d, u), a| (d + a.down_bits, u + a.up_bits))
    }
}

/// Per-shape cache of input window counts.
#[derive(Default)]
pub struct WindowCache {
    rows: RefCell<HashMap<(u64, u64), (u64, u64)>>,
    cols: RefCell<HashMap<(u64, u64), (u64, u64)>>,
}

impl WindowCache {
    fn rows(&self, s: &TileShape, eo: u64, ek: u64) -> (u64, u64) {
        *self
            .rows
            .borrow_mut()
            .entry((eo, ek))
            .or_insert_with(|| window_sums(s.oy, eo, s.fy, ek, s.stride_y, s.row_clip, s.row_limit))
    }

    fn cols(&self, s: &TileShape, eo: u64, ek: u64) -> (u64, u64) {
        *self
            .cols
            .borrow_mut()
            .entry((eo, ek))
            .or_insert_with(|| window_sums(s.ox, eo, s.fx, ek, s.stride_x, s.col_clip, s.col_limit))
    }
}

/// Loop-nest arithmetic for one shape.
pub struct NestView<'a> {
    pub shape: &'a TileShape,
    pub loops: &'a [Loop],
    pub spatial: &'a [(Axis, u64)],
}

impl NestView<'_> {
    pub fn extent(&self, axis: Axis, d: usize) -> u64 {
        let unrolled: u64 = self.spatial.iter().filter(|(a, _)| *a == axis).map(|(_, u)| u).product();
        unrolled * self.loops[..d].iter().filter(|l| l.axis == axis).map(|l| l.bound).product::<u64>()
    }

    fn run(&self, kind: OperandKind, d: usize) -> u64 {
        self.loops[d..].iter().take_while(|l| !self.shape.relevant(kind, l.axis)).map(|l| l.bound).product()
    }

    /// Number of distinct working sets fetched into a level at depth `d`.
    pub fn loads(&self, kind: OperandKind, d: usize) -> u64 {
        self.loops[d..].iter().map(|l| l.bound).product::<u64>() / self.run(kind, d)
    }

    /// Visits per element of an operand held at depth `d`.
    pub fn visits(&self, kind: OperandKind, d: usize) -> u64 {
        self.loops[d..].iter().filter(|l| !self.shape.relevant(kind, l.axis)).map(|l| l.bound).product::<u64>()
            / self.run(kind, d)
    }

    /// Depth of the innermost run of loops irrelevant to `kind`.
    pub fn innermost_run(&self, kind: OperandKind) -> usize {
        self.loops.iter().take_while(|l| !self.shape.relevant(kind, l.axis)).count()
    }

    fn elements(&self, axes: &[Axis], d: usize) -> u64 {
        axes.iter().map(|&a| self.extent(a, d)).product()
    }

    fn in_axis(&self) -> Axis {
        if self.shape.weighted() {
            Axis::C
        } else {
            Axis::K
        }
    }

    /// Total bits filled into a level holding `kind` at depth `d` (weights and inputs).
    pub fn fill_bits(&self, kind: OperandKind, d: usize, cache: &WindowCache) -> u64 {
        let s = self.shape;
        match kind {
            OperandKind::Weight => {
                self.elements(&[Axis::K, Axis::C, Axis::FY, Axis::FX], d) * self.loads(kind, d) * s.prec_w as u64
            }
            OperandKind::InputFeature => {
                let (eoy, efy, eox, efx) =
                    (self.extent(Axis::OY, d), self.extent(Axis::FY, d), self.extent(Axis::OX, d), self.extent(Axis::FX, d));
                let blocks = (s.oy / eoy) * (s.fy / efy) * (s.ox / eox) * (s.fx / efx);
                let per_block = self.loads(kind, d) / blocks;
                let rows = cache.rows(s, eoy, efy).0;
                let cols = cache.cols(s, eox, efx).0;
                per_block * self.extent(self.in_axis(), d) * self.extent(Axis::T, d) * rows * cols * s.arity * s.prec_in as u64
            }
            _ => unreachable!("fill_bits is for weights and inputs"),
        }
    }

    /// Capacity bits of `kind` held at depth `d`; `below_visits` is the visit
    /// count of the boundary underneath (partial sums need full accumulator width).
    pub fn footprint_bits(&self, kind: OperandKind, d: usize, below_visits: u64, cache: &WindowCache) -> u64 {
        let s = self.shape;
        match kind {
            OperandKind::Weight => self.elements(&[Axis::K, Axis::C, Axis::FY, Axis::FX], d) * s.prec_w as u64,
            OperandKind::InputFeature => {
                let rows = cache.rows(s, self.extent(Axis::OY, d), self.extent(Axis::FY, d)).1;
                let cols = cache.cols(s, self.extent(Axis::OX, d), self.extent(Axis::FX, d)).1;
                self.extent(self.in_axis(), d) * self.extent(Axis::T, d) * rows * cols * s.arity * s.prec_in as u64
            }
            OperandKind::OutputFeature => {
                let prec = if below_visits > 1 { PSUM_BITS } else { s.prec_out as u64 };
                self.elements(&[Axis::T, Axis::K, Axis::OY, Axis::OX], d) * prec
            }
            OperandKind::AccumulatorState | OperandKind::AuxState => {
                self.elements(&[Axis::K, Axis::OY, Axis::OX], d) * s.precision(kind)
            }
        }
    }
}

fn read_energy(accel: &AcceleratorModel, core: usize, loc: Loc) -> u64 {
    match loc {
        Loc::Pe => 0,
        Loc::Level(i) => accel.cores[core].levels[i].e_rd_fj,
        Loc::Dram => accel.dram.e_rd_fj,
    }
}

fn write_energy(accel: &AcceleratorModel, core: usize, loc: Loc) -> u64 {
    match loc {
        Loc::Pe => 0,
        Loc::Level(i) => accel.cores[core].levels[i].e_wr_fj,
        Loc::Dram => accel.dram.e_wr_fj,
    }
}

/// Capacity of an on-chip level as seen by this shape.
pub fn level_capacity(accel: &AcceleratorModel, shape: &TileShape, level: usize) -> u64 {
    let core = &accel.cores[shape.core];
    let cap = core.levels[level].capacity_bits;
    if level == core.global_level() {
        cap.min(shape.gb_avail)
    } else {
        cap
    }
}

/// Per-level allocation of a nest, or `None` if some level overflows.
pub fn allocation(accel: &AcceleratorModel, view: &NestView, residency: &[Residency], cache: &WindowCache) -> Option<Vec<(Loc, u64)>> {
    let mut alloc: Vec<(Loc, u64)> = Vec::new();
    for r in residency {
        let top = r.levels.len() - 1;
        for j in 1..r.levels.len() {
            let (loc, d) = r.levels[j];
            if !matches!(loc, Loc::Level(_)) {
                continue;
            }
            let bits = if r.kind == OperandKind::OutputFeature && view.shape.stateful {
                if j == top {
                    view.footprint_bits(r.kind, d, 1, cache)
                } else {
                    0
                }
            } else {
                let below = r.levels[j - 1].1;
                view.footprint_bits(r.kind, d, view.visits(r.kind, below), cache)
            };
            match alloc.iter_mut().find(|(l, _)| *l == loc) {
                Some(e) => e.1 += bits,
                None => alloc.push((loc, bits)),
            }
        }
    }
    for &(loc, bits) in &alloc {
        if let Loc::Level(i) = loc {
            if bits > level_capacity(accel, view.shape, i) {
                return None;
            }
        }
    }
    alloc.sort();
    Some(alloc)
}

/// Per-boundary bit counts of a nest.
pub fn access_counts(view: &NestView, residency: &[Residency], cache: &WindowCache) -> Vec<Access> {
    let s = view.shape;
    let mut out = Vec::new();
    for r in residency {
        for pair in r.levels.windows(2) {
            let ((lower, d), (upper, _)) = (pair[0], pair[1]);
            let (down_bits, up_bits) = match r.kind {
                OperandKind::Weight | OperandKind::InputFeature => (view.fill_bits(r.kind, d, cache), 0),
                OperandKind::OutputFeature if s.stateful => (0, s.output_elements() * s.prec_out as u64),
                OperandKind::OutputFeature => {
                    let n = s.output_elements();
                    let v = view.visits(r.kind, d);
                    let spill = n * (v - 1) * PSUM_BITS;
                    (spill, spill + n * s.prec_out as u64)
                }
                OperandKind::AccumulatorState | OperandKind::AuxState => {
                    let n = s.state_elements();
                    let v = view.visits(r.kind, d);
                    let p = s.precision(r.kind);
                    (n * (v - s.t_first as u64) * p, n * (v - s.t_last as u64) * p)
                }
            };
            out.push(Access { operand: r.kind, lower, upper, down_bits, up_bits });
        }
    }
    out
}

/// Energy and latency of a nest with the given access counts.
pub fn estimate_cost(
    accel: &AcceleratorModel,
    view: &NestView,
    residency: &[Residency],
    accesses: Vec<Access>,
    allocation: Vec<(Loc, u64)>,
) -> MappingCost {
    let s = view.shape;
    let core = &accel.cores[s.core];
    let mut breakdown: Vec<EnergyEntry> = Vec::new();
    let mut add = |loc: Loc, operand: Option<OperandKind>, fj: u64| {
        if fj == 0 {
            return;
        }
        match breakdown.iter_mut().find(|e| e.loc == loc && e.operand == operand) {
            Some(e) => e.fj += fj,
            None => breakdown.push(EnergyEntry { loc, operand, fj }),
        }
    };
    let mut traffic: HashMap<Loc, (u64, u64)> = HashMap::new();
    for a in &accesses {
        let k = Some(a.operand);
        add(a.upper, k, a.down_bits * read_energy(accel, s.core, a.upper));
        add(a.lower, k, a.down_bits * write_energy(accel, s.core, a.lower));
        add(a.lower, k, a.up_bits * read_energy(accel, s.core, a.lower));
        add(a.upper, k, a.up_bits * write_energy(accel, s.core, a.upper));
        let up = traffic.entry(a.upper).or_default();
        up.0 += a.down_bits;
        up.1 += a.up_bits;
        let lo = traffic.entry(a.lower).or_default();
        lo.0 += a.up_bits;
        lo.1 += a.down_bits;
    }
    let op_energy = if s.sop { core.pe.e_sop_fj } else { core.pe.e_mac_fj };
    add(Loc::Pe, None, s.ops() * op_energy);
    breakdown.sort_by_key(|e| (e.loc, e.operand.map(|k| k as u8)));
    let energy_fj = breakdown.iter().map(|e| e.fj).sum();

    let compute_cycles: u64 = view.loops.iter().map(|l| l.bound).product();
    let mut memory_cycles = 0;
    for (loc, (rd, wr)) in traffic {
        let cycles = match loc {
            Loc::Pe => 0,
            Loc::Level(i) => rd.div_ceil(core.levels[i].bw_rd).max(wr.div_ceil(core.levels[i].bw_wr)),
            Loc::Dram => (rd + wr).div_ceil(accel.dram_link_bw(s.core)),
        };
        memory_cycles = memory_cycles.max(cycles);
    }
    MappingCost {
        energy_fj,
        breakdown,
        latency_cycles: compute_cycles.max(memory_cycles),
        compute_cycles,
        memory_bound: memory_cycles > compute_cycles,
        accesses,
        nest: LoopNest { loops: view.loops.to_vec(), spatial: view.spatial.to_vec(), residency: residency.to_vec() },
        allocation,
    }
}
