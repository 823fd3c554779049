//! Element-level reference simulator. Loop nests are walked point by point
//! with explicit per-level working sets, schedule traces are replayed with
//! their own residency bookkeeping, and tile orders are checked by running
//! the network functionally against a naive timestep-major execution.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::accelerator::{AcceleratorModel, Endpoint};
use crate::intramap::{plan_placement, Access, Loc, Loop, LoopNest, Mapper, Placement, TileShape, PSUM_BITS};
use crate::scheduler::{schedule, OperandClass, ScheduleOptions, ScheduleResult, TensorKey};
use crate::tilegraph::TileGraph;
use crate::workload::{lif_step, Axis, OpClass, OperandKind, WorkloadGraph, STATE_BITS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Down,
    Up,
}

impl Direction {
    pub fn name(self) -> &'static str {
        match self {
            Direction::Down => "down",
            Direction::Up => "up",
        }
    }
}

/// Boundary key: (lower, upper, operand, direction).
pub type Boundary = (Loc, Loc, OperandKind, Direction);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EventKind {
    Fetch,
    WriteBack,
    Compute,
    Evict,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SimEvent {
    pub time: u64,
    pub kind: EventKind,
    pub core: usize,
    pub tile: Option<usize>,
    pub tensor: Option<TensorKey>,
    /// Bits moved, or operations for compute events.
    pub amount: u64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct SimCounters {
    /// Nonzero bit counts per boundary.
    pub bits: BTreeMap<Boundary, u64>,
    pub ops: u64,
    pub energy_fj: u64,
    pub latency_cycles: u64,
    pub dram_bits: u64,
    pub dram_bits_by_class: BTreeMap<OperandClass, u64>,
    /// Peak occupancy per (core, level).
    pub peak_bits: BTreeMap<(usize, Loc), u64>,
    pub events: Vec<SimEvent>,
}

impl SimCounters {
    fn add_bits(&mut self, key: Boundary, bits: u64) {
        if bits > 0 {
            *self.bits.entry(key).or_default() += bits;
        }
    }

    /// CSV `lower,upper,operand,direction,bits`.
    pub fn to_csv(&self) -> String {
        let loc = |l: Loc| match l {
            Loc::Pe => "pe".to_string(),
            Loc::Level(i) => format!("level{i}"),
            Loc::Dram => "dram".to_string(),
        };
        let mut out = String::from("lower,upper,operand,direction,bits\n");
        for (&(lo, up, kind, dir), bits) in &self.bits {
            out.push_str(&format!("{},{},{},{},{}\n", loc(lo), loc(up), kind.name(), dir.name(), bits));
        }
        out
    }

    /// One JSON object per event.
    pub fn events_jsonl(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            let v = serde_json::json!({
                "time": e.time, "kind": format!("{:?}", e.kind), "core": e.core, "tile": e.tile,
                "tensor": e.tensor.map(|k| format!("{k:?}")), "amount": e.amount,
            });
            out.push_str(&v.to_string());
            out.push('\n');
        }
        out
    }
}

/// Nonzero per-boundary bits of an analytical access list, keyed like [`SimCounters::bits`].
pub fn analytical_bits(accesses: &[Access]) -> BTreeMap<Boundary, u64> {
    let mut out = BTreeMap::new();
    for a in accesses {
        for (dir, bits) in [(Direction::Down, a.down_bits), (Direction::Up, a.up_bits)] {
            if bits > 0 {
                *out.entry((a.lower, a.upper, a.operand, dir)).or_default() += bits;
            }
        }
    }
    out
}

const N_AXES: usize = 7;

fn ax(a: Axis) -> usize {
    a as usize
}

type Point = [u64; N_AXES];

struct Walker<'a> {
    shape: &'a TileShape,
    loops: &'a [Loop],
    /// (axis, bound, place value) of spatial digits.
    spatial: Vec<(Axis, u64, u64)>,
    places: Vec<u64>,
    points: u64,
}

#[derive(Debug, Clone, Copy, Default)]
struct PassStats {
    down: u64,
    up: u64,
    max_elems: u64,
    partial_up: bool,
}

impl<'a> Walker<'a> {
    fn new(shape: &'a TileShape, nest: &'a LoopNest) -> Result<Self> {
        let mut next = [1u64; N_AXES];
        let mut spatial = Vec::new();
        for &(a, u) in &nest.spatial {
            spatial.push((a, u, next[ax(a)]));
            next[ax(a)] *= u;
        }
        let mut places = Vec::new();
        for l in &nest.loops {
            places.push(next[ax(l.axis)]);
            next[ax(l.axis)] *= l.bound;
        }
        for a in Axis::ALL {
            if next[ax(a)] != shape.dim(a) {
                return Err(Error::Internal(format!("nest {} covers {} of {} along {}", nest.describe(), next[ax(a)], shape.dim(a), a.name())));
            }
        }
        let points = Axis::ALL.iter().map(|&a| shape.dim(a)).product();
        Ok(Walker { shape, loops: &nest.loops, spatial, places, points })
    }

    /// Calls `f` with the points of every outer iteration at depth `d`, in execution order.
    fn blocks(&self, d: usize, mut f: impl FnMut(&[Point])) {
        let mut inner: Vec<Point> = vec![[0; N_AXES]];
        let digits = self.spatial.iter().copied().chain(self.loops[..d].iter().zip(&self.places).map(|(l, &p)| (l.axis, l.bound, p)));
        for (a, bound, place) in digits {
            let mut grown = Vec::with_capacity(inner.len() * bound as usize);
            for i in 0..bound {
                for p in &inner {
                    let mut q = *p;
                    q[ax(a)] += i * place;
                    grown.push(q);
                }
            }
            inner = grown;
        }
        let outer = &self.loops[d..];
        let places = &self.places[d..];
        let total: u64 = outer.iter().map(|l| l.bound).product();
        let mut buf = inner.clone();
        for idx in 0..total {
            let mut base = [0u64; N_AXES];
            let mut rest = idx;
            for (l, &p) in outer.iter().zip(places) {
                base[ax(l.axis)] += (rest % l.bound) * p;
                rest /= l.bound;
            }
            for (dst, src) in buf.iter_mut().zip(&inner) {
                for i in 0..N_AXES {
                    dst[i] = src[i] + base[i];
                }
            }
            f(&buf);
        }
    }

    fn weight_key(&self, p: &Point) -> u64 {
        let s = self.shape;
        ((p[ax(Axis::K)] * s.c + p[ax(Axis::C)]) * s.fy + p[ax(Axis::FY)]) * s.fx + p[ax(Axis::FX)]
    }

    fn output_key(&self, p: &Point) -> u64 {
        let s = self.shape;
        ((p[ax(Axis::T)] * s.k + p[ax(Axis::K)]) * s.oy + p[ax(Axis::OY)]) * s.ox + p[ax(Axis::OX)]
    }

    fn state_key(&self, p: &Point) -> u64 {
        let s = self.shape;
        (p[ax(Axis::K)] * s.oy + p[ax(Axis::OY)]) * s.ox + p[ax(Axis::OX)]
    }

    fn input_keys(&self, p: &Point, out: &mut Vec<u64>) {
        let s = self.shape;
        let x = p[ax(Axis::OY)] * s.stride_y + p[ax(Axis::FY)];
        let y = p[ax(Axis::OX)] * s.stride_x + p[ax(Axis::FX)];
        if x < s.row_clip || x >= s.row_limit || y < s.col_clip || y >= s.col_limit {
            return;
        }
        let (ch, n_ch) = if s.weighted() { (p[ax(Axis::C)], s.c) } else { (p[ax(Axis::K)], s.k) };
        let reach_x = (s.oy - 1) * s.stride_y + s.fy;
        let reach_y = (s.ox - 1) * s.stride_x + s.fx;
        for a in 0..s.arity {
            out.push((((a * n_ch + ch) * s.t + p[ax(Axis::T)]) * reach_x + x) * reach_y + y);
        }
    }

    /// Walks the nest once with the operand's working set held at depth `d`.
    fn pass(&self, kind: OperandKind, d: usize) -> PassStats {
        let s = self.shape;
        let mut st = PassStats::default();
        let mut prev: Option<Vec<u64>> = None;
        let mut cur = Vec::new();
        let n_elems = match kind {
            OperandKind::OutputFeature => s.output_elements(),
            OperandKind::AccumulatorState | OperandKind::AuxState => s.k * s.oy * s.ox,
            _ => 0,
        };
        let mut count = vec![0u64; n_elems as usize];
        let per_elem = if n_elems > 0 { self.points / n_elems } else { 0 };
        let mut completions = 0u64;
        let p_out = s.prec_out as u64;
        let p_state = STATE_BITS as u64;

        let evict = |set: &[u64], count: &[u64], st: &mut PassStats| match kind {
            OperandKind::OutputFeature if !s.stateful => {
                for &e in set {
                    if count[e as usize] == per_elem {
                        st.up += p_out;
                    } else {
                        st.up += PSUM_BITS;
                        st.partial_up = true;
                    }
                }
            }
            OperandKind::AccumulatorState | OperandKind::AuxState => {
                for &e in set {
                    let done = count[e as usize] == per_elem;
                    if !(done && s.t_last) {
                        st.up += p_state;
                    }
                }
            }
            _ => {}
        };

        self.blocks(d, |pts| {
            cur.clear();
            match kind {
                OperandKind::Weight => cur.extend(pts.iter().map(|p| self.weight_key(p))),
                OperandKind::InputFeature => {
                    for p in pts {
                        self.input_keys(p, &mut cur);
                    }
                }
                OperandKind::OutputFeature => cur.extend(pts.iter().map(|p| self.output_key(p))),
                OperandKind::AccumulatorState | OperandKind::AuxState => cur.extend(pts.iter().map(|p| self.state_key(p))),
            }
            cur.sort_unstable();
            cur.dedup();
            st.max_elems = st.max_elems.max(cur.len() as u64);
            if prev.as_deref() != Some(&cur[..]) {
                if let Some(old) = prev.take() {
                    evict(&old, &count, &mut st);
                }
                match kind {
                    OperandKind::Weight => st.down += cur.len() as u64 * s.prec_w as u64,
                    OperandKind::InputFeature => st.down += cur.len() as u64 * s.prec_in as u64,
                    OperandKind::OutputFeature if !s.stateful => {
                        st.down += cur.iter().filter(|&&e| count[e as usize] > 0).count() as u64 * PSUM_BITS;
                    }
                    OperandKind::AccumulatorState | OperandKind::AuxState => {
                        let reads = cur.iter().filter(|&&e| count[e as usize] > 0 || !s.t_first).count() as u64;
                        st.down += reads * p_state;
                    }
                    _ => {}
                }
                prev = Some(cur.clone());
            }
            if n_elems > 0 {
                for p in pts {
                    let e = match kind {
                        OperandKind::OutputFeature => self.output_key(p),
                        _ => self.state_key(p),
                    } as usize;
                    count[e] += 1;
                    if count[e] == per_elem {
                        completions += 1;
                    }
                }
            }
        });
        if let Some(old) = prev {
            evict(&old, &count, &mut st);
        }
        if kind == OperandKind::OutputFeature && s.stateful {
            st.up = completions * p_out;
        }
        st
    }
}

fn loc_energy(accel: &AcceleratorModel, core: usize, loc: Loc) -> (u64, u64) {
    match loc {
        Loc::Pe => (0, 0),
        Loc::Level(i) => (accel.cores[core].levels[i].e_rd_fj, accel.cores[core].levels[i].e_wr_fj),
        Loc::Dram => (accel.dram.e_rd_fj, accel.dram.e_wr_fj),
    }
}

/// Walks `nest` over `shape` element by element and counts every bit moved
/// across every boundary of every operand's residency chain. Fails if a
/// level's working sets exceed its capacity.
pub fn simulate_nest(accel: &AcceleratorModel, shape: &TileShape, nest: &LoopNest) -> Result<SimCounters> {
    let walker = Walker::new(shape, nest)?;
    let core = &accel.cores[shape.core];
    let mut passes: HashMap<(OperandKind, usize), PassStats> = HashMap::new();
    let mut pass = |kind: OperandKind, d: usize| *passes.entry((kind, d)).or_insert_with(|| walker.pass(kind, d));
    let mut c = SimCounters::default();
    let mut occupancy: BTreeMap<usize, u64> = BTreeMap::new();
    for r in &nest.residency {
        let top = r.levels.len() - 1;
        for j in 1..r.levels.len() {
            let (lower, d) = r.levels[j - 1];
            let (upper, du) = r.levels[j];
            let st = pass(r.kind, d);
            c.add_bits((lower, upper, r.kind, Direction::Down), st.down);
            c.add_bits((lower, upper, r.kind, Direction::Up), st.up);
            if let Loc::Level(i) = upper {
                let elems = pass(r.kind, du).max_elems;
                let prec = match r.kind {
                    OperandKind::OutputFeature if shape.stateful => {
                        if j == top {
                            shape.prec_out as u64
                        } else {
                            0
                        }
                    }
                    OperandKind::OutputFeature => {
                        if st.partial_up {
                            PSUM_BITS
                        } else {
                            shape.prec_out as u64
                        }
                    }
                    k => shape.precision(k),
                };
                *occupancy.entry(i).or_default() += elems * prec;
            }
        }
    }
    for (&i, &bits) in &occupancy {
        let mut cap = core.levels[i].capacity_bits;
        if i == core.global_level() {
            cap = cap.min(shape.gb_avail);
        }
        if bits > cap {
            return Err(Error::Internal(format!("{} holds {bits} bits, capacity {cap}", core.levels[i].name)));
        }
        c.peak_bits.insert((shape.core, Loc::Level(i)), bits);
    }

    c.ops = if shape.weighted() { walker.points } else { shape.output_elements() };
    let e_op = if shape.sop { core.pe.e_sop_fj } else { core.pe.e_mac_fj };
    let mut energy = c.ops * e_op;
    let mut traffic: BTreeMap<Loc, (u64, u64)> = BTreeMap::new();
    for (&(lower, upper, kind, dir), &bits) in &c.bits {
        let (src, dst) = match dir {
            Direction::Down => (upper, lower),
            Direction::Up => (lower, upper),
        };
        energy += bits * (loc_energy(accel, shape.core, src).0 + loc_energy(accel, shape.core, dst).1);
        traffic.entry(src).or_default().0 += bits;
        traffic.entry(dst).or_default().1 += bits;
        if upper == Loc::Dram {
            c.dram_bits += bits;
            *c.dram_bits_by_class.entry(OperandClass::of(Some(kind))).or_default() += bits;
        }
    }
    c.energy_fj = energy;
    let mut cycles: u64 = nest.loops.iter().map(|l| l.bound).product();
    for (loc, (rd, wr)) in traffic {
        let t = match loc {
            Loc::Pe => 0,
            Loc::Level(i) => rd.div_ceil(core.levels[i].bw_rd).max(wr.div_ceil(core.levels[i].bw_wr)),
            Loc::Dram => (rd + wr).div_ceil(accel.dram_link_bw(shape.core)),
        };
        cycles = cycles.max(t);
    }
    c.latency_cycles = cycles;
    Ok(c)
}

struct Held {
    bits: u64,
    uses: u64,
    /// A DRAM copy exists.
    in_dram: bool,
    cores: BTreeSet<usize>,
}

struct Replay<'a> {
    accel: &'a AcceleratorModel,
    held: BTreeMap<TensorKey, Held>,
    used: Vec<u64>,
    out: SimCounters,
    now: u64,
}

impl Replay<'_> {
    fn gb(&self, core: usize) -> Loc {
        Loc::Level(self.accel.cores[core].global_level())
    }

    fn link_fj(&self, core: usize) -> u64 {
        self.accel.link(Endpoint::Core(core), Endpoint::Dram).map_or(0, |l| l.e_fj)
    }

    fn boundary_kind(key: TensorKey, dir: Direction) -> OperandKind {
        match (key, dir) {
            (TensorKey::Weight { .. }, _) => OperandKind::Weight,
            (TensorKey::State(_), _) => OperandKind::AccumulatorState,
            (TensorKey::Feature(_), Direction::Down) => OperandKind::InputFeature,
            (TensorKey::Feature(_), Direction::Up) => OperandKind::OutputFeature,
        }
    }

    fn dram(&mut self, key: TensorKey, core: usize, dir: Direction) {
        let bits = self.held[&key].bits;
        let (g_rd, g_wr) = loc_energy(self.accel, core, self.gb(core));
        let per_bit = match dir {
            Direction::Down => self.accel.dram.e_rd_fj + g_wr,
            Direction::Up => g_rd + self.accel.dram.e_wr_fj,
        } + self.link_fj(core);
        self.out.energy_fj += bits * per_bit;
        self.out.dram_bits += bits;
        *self.out.dram_bits_by_class.entry(key.class()).or_default() += bits;
        let gb = self.gb(core);
        self.out.add_bits((gb, Loc::Dram, Self::boundary_kind(key, dir), dir), bits);
        let kind = if dir == Direction::Down { EventKind::Fetch } else { EventKind::WriteBack };
        self.out.events.push(SimEvent { time: self.now, kind, core, tile: None, tensor: Some(key), amount: bits });
        if dir == Direction::Up {
            self.held.get_mut(&key).unwrap().in_dram = true;
        }
    }

    fn put(&mut self, key: TensorKey, core: usize) -> Result<()> {
        let h = self.held.get_mut(&key).unwrap();
        if h.cores.insert(core) {
            self.used[core] += h.bits;
            let cap = self.accel.cores[core].global_capacity_bits();
            if self.used[core] > cap {
                return Err(Error::Internal(format!("event {}: core{core} holds {} of {cap} bits", self.out.events.len(), self.used[core])));
            }
            let gb = self.gb(core);
            let peak = self.out.peak_bits.entry((core, gb)).or_default();
            *peak = (*peak).max(self.used[core]);
        }
        Ok(())
    }

    fn remove(&mut self, key: TensorKey, core: usize) {
        let h = self.held.get_mut(&key).unwrap();
        if h.cores.remove(&core) {
            self.used[core] -= h.bits;
            self.out.events.push(SimEvent { time: self.now, kind: EventKind::Evict, core, tile: None, tensor: Some(key), amount: h.bits });
        }
    }

    /// Drops `key` from `core`, saving it to DRAM if it is still needed and
    /// nowhere else.
    fn spill(&mut self, key: TensorKey, core: usize) {
        let h = &self.held[&key];
        if h.uses > 0 && !h.in_dram && h.cores.len() == 1 {
            self.dram(key, core, Direction::Up);
        }
        self.remove(key, core);
    }

    fn forget(&mut self, key: TensorKey) {
        if let Some(h) = self.held.remove(&key) {
            for c in h.cores {
                self.used[c] -= h.bits;
            }
        }
    }

    fn consume(&mut self, key: TensorKey) {
        let h = self.held.get_mut(&key).unwrap();
        h.uses -= 1;
        if h.uses == 0 {
            self.forget(key);
        }
    }
}

/// Replays the execution order of `trace` with independent residency,
/// eviction and write-back bookkeeping, re-deriving every DRAM and NoC
/// transfer. Tile-internal traffic is recounted with [`simulate_nest`].
/// Fails on dependency or capacity violations.
pub fn simulate_schedule(w: &WorkloadGraph, tg: &TileGraph, accel: &AcceleratorModel, trace: &ScheduleResult) -> Result<SimCounters> {
    let is_input = |t: usize| w.nodes[tg.tiles[t].op].op_class == OpClass::InputSource;
    let preds = tg.predecessors();
    let mut finished: Vec<Option<u64>> = vec![None; tg.tiles.len()];
    for (i, e) in trace.exec.iter().enumerate() {
        if finished[e.tile].is_some() {
            return Err(Error::Internal(format!("exec {i}: tile {} runs twice", e.tile)));
        }
        for &p in &preds[e.tile] {
            if is_input(p) {
                continue;
            }
            match finished[p] {
                Some(end) if end <= e.t0 => {}
                _ => return Err(Error::Internal(format!("exec {i}: tile {} starts before predecessor {p}", e.tile))),
            }
        }
        finished[e.tile] = Some(e.t1);
    }
    if let Some(t) = (0..tg.tiles.len()).find(|&t| !is_input(t) && finished[t].is_none()) {
        return Err(Error::Internal(format!("tile {t} never runs")));
    }
    let mut windows: Vec<(u64, u64)> = trace.transfers.iter().filter(|x| x.via_dram).map(|x| (x.t0, x.t1)).collect();
    windows.sort_unstable();
    if let Some(p) = windows.windows(2).find(|p| p[0].1 > p[1].0) {
        return Err(Error::Internal(format!("DRAM transfers overlap at cycle {}", p[1].0)));
    }

    let mut inputs_of: Vec<BTreeSet<usize>> = vec![BTreeSet::new(); tg.tiles.len()];
    for e in &tg.data_edges {
        inputs_of[e.dst].insert(e.src);
    }
    let mut r = Replay { accel, held: BTreeMap::new(), used: vec![0; accel.cores.len()], out: SimCounters::default(), now: 0 };
    let mut feature_uses = vec![0u64; tg.tiles.len()];
    for ins in &inputs_of {
        for &p in ins {
            feature_uses[p] += 1;
        }
    }
    for t in (0..tg.tiles.len()).filter(|&t| is_input(t)) {
        let key = TensorKey::Feature(t);
        r.held.insert(key, Held { bits: tg.tiles[t].footprint.output, uses: feature_uses[t], in_dram: true, cores: BTreeSet::new() });
    }
    for e in &trace.exec {
        let op = tg.tiles[e.tile].op;
        if w.nodes[op].op_class.has_weights() {
            let key = TensorKey::Weight { op, core: e.core };
            let bits = w.nodes[op].weight_bits();
            r.held.entry(key).or_insert(Held { bits, uses: 0, in_dram: true, cores: BTreeSet::new() }).uses += 1;
        }
    }
    let sinks: BTreeSet<usize> = w.sinks().into_iter().collect();
    let mut nest_cache: HashMap<TileShape, SimCounters> = HashMap::new();

    for e in &trace.exec {
        let (t, core) = (e.tile, e.core);
        r.now = e.t0;
        let tile = &tg.tiles[t];
        let node = &w.nodes[tile.op];
        let pl = e.shape.placement;
        let mut on_chip: BTreeSet<TensorKey> = BTreeSet::new();
        let mut off_chip: Vec<TensorKey> = Vec::new();
        let mut sort = |key: TensorKey, off: bool| {
            if off {
                off_chip.push(key)
            } else {
                on_chip.insert(key);
            }
        };
        if node.op_class.has_weights() {
            sort(TensorKey::Weight { op: tile.op, core }, pl.weight);
        }
        for &p in &inputs_of[t] {
            sort(TensorKey::Feature(p), pl.input);
        }
        let prev_state = (node.stateful && tile.tau > 0).then(|| TensorKey::State(tg.tile_at(tile.op, tile.s, tile.tau - 1)));
        if let Some(k) = prev_state {
            sort(k, pl.state);
        }
        for &k in on_chip.iter().chain(&off_chip) {
            if !r.held.contains_key(&k) {
                return Err(Error::Internal(format!("tile {t}: operand {k:?} does not exist")));
            }
        }

        if pl.any() {
            let resident: Vec<TensorKey> = r.held.iter().filter(|(k, h)| h.cores.contains(&core) && !on_chip.contains(k)).map(|(k, _)| *k).collect();
            for k in resident {
                r.spill(k, core);
            }
            for k in &off_chip {
                let h = &r.held[k];
                if !h.in_dram {
                    let holder = *h.cores.iter().next().expect("tensor without any copy");
                    r.dram(*k, holder, Direction::Up);
                }
            }
        }

        let fresh = if pl.output { 0 } else { tile.footprint.output }
            + if node.stateful && prev_state.is_none() && !pl.state { tile.footprint.state } else { 0 };
        let missing: Vec<TensorKey> = on_chip.iter().copied().filter(|k| !r.held[k].cores.contains(&core)).collect();
        let need = missing.iter().map(|k| r.held[k].bits).sum::<u64>() + fresh;
        let cap = accel.cores[core].global_capacity_bits();
        if cap - r.used[core] < need {
            let mut victims: Vec<(u64, std::cmp::Reverse<u64>, TensorKey)> = r
                .held
                .iter()
                .filter(|(k, h)| h.cores.contains(&core) && !on_chip.contains(k))
                .map(|(k, h)| (h.uses, std::cmp::Reverse(h.bits), *k))
                .collect();
            victims.sort();
            for (_, _, k) in victims {
                if cap - r.used[core] >= need {
                    break;
                }
                r.spill(k, core);
            }
        }
        for k in missing {
            let other = r.held[&k].cores.iter().next().copied();
            match other {
                Some(from) => {
                    let bits = r.held[&k].bits;
                    let link = accel
                        .link(Endpoint::Core(from), Endpoint::Core(core))
                        .ok_or_else(|| Error::Internal(format!("no link core{from}->core{core}")))?;
                    let (rd, _) = loc_energy(accel, from, r.gb(from));
                    let (_, wr) = loc_energy(accel, core, r.gb(core));
                    r.out.energy_fj += bits * (rd + wr + link.e_fj);
                    r.out.events.push(SimEvent { time: r.now, kind: EventKind::Fetch, core, tile: Some(t), tensor: Some(k), amount: bits });
                }
                None => {
                    if !r.held[&k].in_dram {
                        return Err(Error::Internal(format!("tile {t}: {k:?} was dropped while still needed")));
                    }
                    r.dram(k, core, Direction::Down);
                }
            }
            r.put(k, core)?;
        }
        if r.used[core] + fresh > cap {
            return Err(Error::Internal(format!("tile {t}: outputs do not fit on core{core}")));
        }

        let sim = match nest_cache.get(&e.shape) {
            Some(s) => s.clone(),
            None => {
                let s = simulate_nest(accel, &e.shape, &e.mapping.nest)?;
                nest_cache.insert(e.shape.clone(), s.clone());
                s
            }
        };
        r.out.energy_fj += sim.energy_fj;
        r.out.ops += sim.ops;
        r.out.dram_bits += sim.dram_bits;
        for (&class, &bits) in &sim.dram_bits_by_class {
            *r.out.dram_bits_by_class.entry(class).or_default() += bits;
        }
        for (&k, &bits) in sim.bits.iter().filter(|(k, _)| k.1 == Loc::Dram) {
            r.out.add_bits(k, bits);
        }
        r.out.events.push(SimEvent { time: e.t0, kind: EventKind::Compute, core, tile: Some(t), tensor: None, amount: sim.ops });

        if node.op_class.has_weights() {
            r.consume(TensorKey::Weight { op: tile.op, core });
        }
        for &p in &inputs_of[t] {
            r.consume(TensorKey::Feature(p));
        }
        if node.stateful {
            if let Some(k) = prev_state {
                r.forget(k);
            }
            if tile.t.end < w.total_timesteps {
                let key = TensorKey::State(t);
                r.held.insert(key, Held { bits: tile.footprint.state, uses: 1, in_dram: pl.state, cores: BTreeSet::new() });
                if !pl.state {
                    r.put(key, core)?;
                }
            }
        }
        let key = TensorKey::Feature(t);
        r.held.insert(key, Held { bits: tile.footprint.output, uses: feature_uses[t], in_dram: pl.output, cores: BTreeSet::new() });
        if !pl.output {
            r.put(key, core)?;
            if sinks.contains(&tile.op) {
                r.now = e.t1;
                r.dram(key, core, Direction::Up);
            }
        }
        if feature_uses[t] == 0 {
            r.forget(key);
        }
    }
    let mut out = r.out;
    out.latency_cycles = trace.exec.iter().map(|e| e.t1).chain(trace.transfers.iter().map(|x| x.t1)).max().unwrap_or(0);
    Ok(out)
}

/// Probability of a spike per input element in [`functional_check`].
pub const SPIKE_PROBABILITY: f64 = 0.1;

struct Network<'a> {
    w: &'a WorkloadGraph,
    /// Per operator: `[k][c][fy][fx]` weights.
    weights: Vec<Vec<f64>>,
    /// Per operator: `[t][k][y][x]` outputs, `None` until produced.
    values: Vec<Vec<Option<f64>>>,
    /// Per operator: membrane potential, last spike and timesteps integrated per neuron.
    state: Vec<Vec<(f64, bool, u64)>>,
}

impl<'a> Network<'a> {
    fn new(w: &'a WorkloadGraph, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t_total = w.total_timesteps as usize;
        let mut weights = Vec::with_capacity(w.nodes.len());
        let mut values = Vec::with_capacity(w.nodes.len());
        let mut state = Vec::with_capacity(w.nodes.len());
        for n in &w.nodes {
            let o = &n.output_shape;
            let per_t = o.elements() as usize;
            let mut v = vec![None; per_t * t_total];
            if n.op_class == OpClass::InputSource {
                for x in &mut v {
                    *x = Some(if n.spiking { rng.gen_bool(SPIKE_PROBABILITY) as u8 as f64 } else { rng.gen_range(0..4) as f64 });
                }
            }
            values.push(v);
            let nw = if n.op_class.has_weights() { (n.dim(Axis::K) * n.dim(Axis::C) * n.dim(Axis::FY) * n.dim(Axis::FX)) as usize } else { 0 };
            weights.push((0..nw).map(|_| rng.gen_range(-1i32..=3) as f64 * 0.5).collect());
            state.push(vec![(0.0, false, 0); if n.stateful { per_t } else { 0 }]);
        }
        Network { w, weights, values, state }
    }

    fn read(&self, op: usize, t: u64, ch: u64, y: i64, x: i64) -> Option<Option<f64>> {
        let s = &self.w.nodes[op].output_shape;
        if y < 0 || x < 0 || y >= s.height as i64 || x >= s.width as i64 {
            return Some(None);
        }
        let i = ((t * s.channels + ch) * s.height + y as u64) * s.width + x as u64;
        self.values[op][i as usize].map(Some)
    }

    /// Pre-activation of one neuron; `None` if an input is not yet produced.
    fn current(&self, op: usize, t: u64, k: u64, oy: u64, ox: u64) -> Option<f64> {
        let n = &self.w.nodes[op];
        let p = &n.projection;
        let y0 = (oy * p.stride_y) as i64 - p.pad_y as i64;
        let x0 = (ox * p.stride_x) as i64 - p.pad_x as i64;
        match n.op_class {
            OpClass::Conv2D | OpClass::Pointwise => {
                let (c_n, fy_n, fx_n) = (n.dim(Axis::C), n.dim(Axis::FY), n.dim(Axis::FX));
                let mut acc = 0.0;
                for c in 0..c_n {
                    for fy in 0..fy_n {
                        for fx in 0..fx_n {
                            if let Some(v) = self.read(n.inputs[0], t, c, y0 + fy as i64, x0 + fx as i64)? {
                                acc += self.weights[op][(((k * c_n + c) * fy_n + fy) * fx_n + fx) as usize] * v;
                            }
                        }
                    }
                }
                Some(acc)
            }
            OpClass::MaxPool => {
                let mut m = f64::NEG_INFINITY;
                for fy in 0..p.kernel_y {
                    for fx in 0..p.kernel_x {
                        if let Some(v) = self.read(n.inputs[0], t, k, y0 + fy as i64, x0 + fx as i64)? {
                            m = m.max(v);
                        }
                    }
                }
                Some(m)
            }
            OpClass::ElementwiseAdd | OpClass::ElementwiseOr => {
                let mut acc = if n.op_class == OpClass::ElementwiseAdd { 0.0 } else { f64::NEG_INFINITY };
                for &src in &n.inputs {
                    let v = self.read(src, t, k, y0, x0)?.unwrap_or(0.0);
                    acc = if n.op_class == OpClass::ElementwiseAdd { acc + v } else { acc.max(v) };
                }
                Some(acc)
            }
            OpClass::InputSource => unreachable!("inputs are pre-filled"),
        }
    }

    /// Computes rows `rows` of `op` over timesteps `ts`. Returns false if an
    /// input is missing, a neuron state is not at timestep `t`, or an output
    /// was already produced.
    fn run(&mut self, op: usize, rows: std::ops::Range<u64>, ts: std::ops::Range<u64>) -> bool {
        let n = &self.w.nodes[op];
        let o = n.output_shape;
        let params = n.lif.unwrap_or_default();
        for t in ts {
            for k in 0..o.channels {
                for oy in rows.clone() {
                    for ox in 0..o.width {
                        let Some(cur) = self.current(op, t, k, oy, ox) else { return false };
                        let neuron = ((k * o.height + oy) * o.width + ox) as usize;
                        let out = if n.stateful {
                            let (v, prev, steps) = self.state[op][neuron];
                            if steps != t {
                                return false;
                            }
                            let (v, spike) = lif_step(v, cur, &params, prev);
                            self.state[op][neuron] = (v, spike, t + 1);
                            spike as u8 as f64
                        } else {
                            cur
                        };
                        let slot = &mut self.values[op][(t * o.elements()) as usize + neuron];
                        if slot.is_some() {
                            return false;
                        }
                        *slot = Some(out);
                    }
                }
            }
        }
        true
    }

    fn same_as(&self, other: &Network) -> bool {
        let bits = |v: &Option<f64>| v.map(f64::to_bits);
        self.values.iter().zip(&other.values).all(|(a, b)| a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.is_some() && bits(x) == bits(y)))
            && self.state.iter().zip(&other.state).all(|(a, b)| a.iter().zip(b).all(|(x, y)| x.0.to_bits() == y.0.to_bits() && x.1 == y.1 && x.2 == y.2))
    }
}

/// Executes the network tile by tile in `order` (input-source tiles are
/// implicit) with seeded random inputs and weights, and compares every
/// produced value and final neuron state bit for bit against a naive
/// timestep-major, operator-by-operator execution. Neuron states carry the
/// number of timesteps they have integrated, so a state read out of sequence
/// fails even where the values happen to agree.
pub fn functional_check(w: &WorkloadGraph, tg: &TileGraph, order: &[usize], seed: u64) -> bool {
    let mut naive = Network::new(w, seed);
    for t in 0..w.total_timesteps {
        for (op, n) in w.nodes.iter().enumerate() {
            if n.op_class != OpClass::InputSource && !naive.run(op, 0..n.output_shape.height, t..t + 1) {
                return false;
            }
        }
    }
    let mut tiled = Network::new(w, seed);
    for &t in order {
        let tile = &tg.tiles[t];
        if w.nodes[tile.op].op_class == OpClass::InputSource {
            continue;
        }
        if !tiled.run(tile.op, tile.rows.clone(), tile.t.clone()) {
            return false;
        }
    }
    tiled.same_as(&naive)
}

/// A uniformly chosen ready tile at every step: a random linear extension of
/// the tile graph over its non-input tiles.
pub fn random_order(w: &WorkloadGraph, tg: &TileGraph, rng: &mut impl Rng) -> Vec<usize> {
    let is_input = |t: usize| w.nodes[tg.tiles[t].op].op_class == OpClass::InputSource;
    let preds = tg.predecessors();
    let mut missing: Vec<usize> = preds.iter().map(|ps| ps.iter().filter(|&&p| !is_input(p)).count()).collect();
    let mut succs = vec![Vec::new(); tg.tiles.len()];
    for (t, ps) in preds.iter().enumerate() {
        for &p in ps {
            succs[p].push(t);
        }
    }
    let mut ready: Vec<usize> = (0..tg.tiles.len()).filter(|&t| !is_input(t) && missing[t] == 0).collect();
    let mut order = Vec::new();
    while !ready.is_empty() {
        let t = ready.swap_remove(rng.gen_range(0..ready.len()));
        order.push(t);
        for &s in &succs[t] {
            missing[s] -= 1;
            if missing[s] == 0 {
                ready.push(s);
            }
        }
    }
    order
}

/// Moves the consumer of a randomly chosen state edge directly in front of
/// its producer. `None` if the graph has no state edges.
pub fn invert_state_edge(order: &[usize], tg: &TileGraph, rng: &mut impl Rng) -> Option<Vec<usize>> {
    let &(a, b) = tg.state_edges.choose(rng)?;
    let mut out: Vec<usize> = order.iter().copied().filter(|&t| t != b).collect();
    let pos = out.iter().position(|&t| t == a)?;
    out.insert(pos, b);
    Some(out)
}

/// A seeded generator for order sampling.
pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Counts and first disagreement of a [`cross_check`] run.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrossCheck {
    pub nests: usize,
    pub replays: usize,
    pub orders: usize,
    pub mismatch: Option<String>,
}

/// Checks one tile graph end to end on core 0: each tile's chosen nest
/// against [`simulate_nest`] (per-boundary bits, energy, latency), the
/// schedule against [`simulate_schedule`] (DRAM bits per class, energy,
/// occupancy), and the scheduler order plus `orders` random orders against
/// [`functional_check`]. Stops at the first mismatch.
pub fn cross_check(w: &WorkloadGraph, tg: &TileGraph, mapper: &Mapper, orders: usize, seed: u64) -> Result<CrossCheck> {
    let accel = mapper.accel();
    let cap = accel.cores[0].global_capacity_bits();
    let mut out = CrossCheck::default();
    let mut seen = std::collections::HashSet::new();
    for tile in tg.tiles.iter().filter(|t| w.nodes[t.op].op_class != OpClass::InputSource) {
        let probe = TileShape::from_tile(w, tile, Placement::default(), cap, 0)?;
        let shape = TileShape { placement: plan_placement(&probe, cap), ..probe };
        let cost = mapper.map(&shape)?;
        if !seen.insert(shape.clone()) {
            continue;
        }
        let sim = simulate_nest(accel, &shape, &cost.nest)?;
        let name = &w.nodes[tile.op].id;
        let expected = analytical_bits(&cost.accesses);
        if sim.bits != expected {
            let (b, _) = sim.bits.iter().chain(expected.iter()).find(|(b, _)| sim.bits.get(b) != expected.get(b)).unwrap();
            out.mismatch = Some(format!(
                "{name}: nest {} boundary {:?}->{:?} {} {}: oracle {} model {}",
                cost.nest.describe(),
                b.0,
                b.1,
                b.2.name(),
                b.3.name(),
                sim.bits.get(b).copied().unwrap_or(0),
                expected.get(b).copied().unwrap_or(0)
            ));
            return Ok(out);
        }
        if sim.energy_fj != cost.energy_fj || sim.latency_cycles != cost.latency_cycles {
            out.mismatch = Some(format!(
                "{name}: nest energy {} vs {} fJ, latency {} vs {} cycles",
                sim.energy_fj, cost.energy_fj, sim.latency_cycles, cost.latency_cycles
            ));
            return Ok(out);
        }
        out.nests += 1;
    }

    let res = schedule(w, tg, mapper, &vec![0; w.nodes.len()], ScheduleOptions { prefetch: false })?;
    let sim = simulate_schedule(w, tg, accel, &res)?;
    let model_classes: BTreeMap<OperandClass, u64> = res.dram_bits_by_class.iter().filter(|(_, &v)| v > 0).map(|(&k, &v)| (k, v)).collect();
    let over = sim.peak_bits.iter().find(|((core, loc), &bits)| match loc {
        Loc::Level(l) => bits > accel.cores[*core].levels[*l].capacity_bits,
        _ => false,
    });
    out.mismatch = if sim.dram_bits != res.dram_bits {
        Some(format!("schedule dram_bits: oracle {} model {}", sim.dram_bits, res.dram_bits))
    } else if sim.dram_bits_by_class != model_classes {
        Some(format!("schedule dram bits by class: oracle {:?} model {:?}", sim.dram_bits_by_class, model_classes))
    } else if sim.energy_fj != res.energy_fj {
        Some(format!("schedule energy_fj: oracle {} model {}", sim.energy_fj, res.energy_fj))
    } else if res.energy.values().sum::<u64>() != res.energy_fj {
        Some("schedule energy breakdown does not sum to the total".into())
    } else if let Some(((core, loc), bits)) = over {
        Some(format!("core{core} {loc:?} peak occupancy {bits} bits over capacity"))
    } else {
        None
    };
    if out.mismatch.is_some() {
        return Ok(out);
    }
    out.replays += 1;

    let mut r = rng(seed);
    let scheduled = crate::scheduler::scheduling_order(w, tg);
    for i in 0..=orders {
        let order = if i == 0 { scheduled.clone() } else { random_order(w, tg, &mut r) };
        if !functional_check(w, tg, &order, seed.wrapping_add(i as u64)) {
            out.mismatch = Some(format!("functional check rejected valid order #{i}"));
            return Ok(out);
        }
        out.orders += 1;
    }
    Ok(out)
}

#[cfg(test)]
mod tests;
