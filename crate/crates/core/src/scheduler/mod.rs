//! Inter-layer scheduling of a tile graph with explicit global-buffer
//! management, an exclusive DRAM link and per-component energy accounting.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::sync::Arc;

use serde::Serialize;

use crate::accelerator::{AcceleratorModel, Endpoint};
use crate::intramap::{Loc, MappingCost, Mapper, Placement, TileShape};
use crate::tilegraph::TileGraph;
use crate::workload::{OpClass, OperandKind, WorkloadGraph};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum Component {
    Dram,
    GlobalSram,
    LocalBuffers,
    Pe,
    Noc,
}

impl Component {
    pub const ALL: [Component; 5] = [Component::Dram, Component::GlobalSram, Component::LocalBuffers, Component::Pe, Component::Noc];

    pub fn name(self) -> &'static str {
        match self {
            Component::Dram => "dram",
            Component::GlobalSram => "global_sram",
            Component::LocalBuffers => "local_buffers",
            Component::Pe => "pe",
            Component::Noc => "noc",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum OperandClass {
    Weight,
    State,
    Feature,
    Compute,
}

impl OperandClass {
    pub const ALL: [OperandClass; 4] = [OperandClass::Weight, OperandClass::State, OperandClass::Feature, OperandClass::Compute];

    pub fn of(kind: Option<OperandKind>) -> Self {
        match kind {
            None => OperandClass::Compute,
            Some(OperandKind::Weight) => OperandClass::Weight,
            Some(OperandKind::AccumulatorState | OperandKind::AuxState) => OperandClass::State,
            Some(_) => OperandClass::Feature,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OperandClass::Weight => "weight",
            OperandClass::State => "state",
            OperandClass::Feature => "feature",
            OperandClass::Compute => "compute",
        }
    }
}

/// Identity of a tensor managed by the scheduler. The derived order is the
/// final eviction tie-breaker.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize)]
pub enum TensorKey {
    Weight { op: usize, core: usize },
    Feature(usize),
    State(usize),
}

impl TensorKey {
    pub fn class(self) -> OperandClass {
        match self {
            TensorKey::Weight { .. } => OperandClass::Weight,
            TensorKey::Feature(_) => OperandClass::Feature,
            TensorKey::State(_) => OperandClass::State,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInstance {
    pub key: TensorKey,
    pub bits: u64,
    pub priority: u64,
    /// True while no DRAM copy exists.
    pub dirty: bool,
    pub cores: Vec<usize>,
}

/// Eviction order: lowest priority first, then largest, then lowest key.
pub fn evict_rank(candidates: &[(TensorKey, u64, u64)]) -> Vec<TensorKey> {
    let mut v = candidates.to_vec();
    v.sort_by_key(|&(key, priority, bits)| (priority, Reverse(bits), key));
    v.into_iter().map(|(k, _, _)| k).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum TransferKind {
    Fetch,
    WriteBack,
    SinkWrite,
    Noc,
    Oversized,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TransferRecord {
    pub kind: TransferKind,
    pub tensor: Option<TensorKey>,
    pub core: usize,
    pub bits: u64,
    pub t0: u64,
    pub t1: u64,
    pub via_dram: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExecRecord {
    pub tile: usize,
    pub core: usize,
    pub t0: u64,
    pub t1: u64,
    pub shape: TileShape,
    pub mapping: Arc<MappingCost>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScheduleResult {
    pub exec: Vec<ExecRecord>,
    pub transfers: Vec<TransferRecord>,
    pub energy: BTreeMap<(Component, OperandClass), u64>,
    pub energy_fj: u64,
    pub latency_cycles: u64,
    pub dram_bits: u64,
    pub dram_bits_by_class: BTreeMap<OperandClass, u64>,
    /// Feature DRAM bits that are network inputs or final outputs.
    pub io_feature_bits: u64,
    pub peak_gb_bits: Vec<u64>,
    pub oversized_tiles: usize,
}

impl ScheduleResult {
    pub fn energy_of(&self, component: Component, class: OperandClass) -> u64 {
        self.energy.get(&(component, class)).copied().unwrap_or(0)
    }

    pub fn component_energy(&self, component: Component) -> u64 {
        self.energy.iter().filter(|((c, _), _)| *c == component).map(|(_, e)| e).sum()
    }

    pub fn class_dram_bits(&self, class: OperandClass) -> u64 {
        self.dram_bits_by_class.get(&class).copied().unwrap_or(0)
    }

    /// Feature traffic excluding network inputs and final outputs.
    pub fn intermediate_feature_bits(&self) -> u64 {
        self.class_dram_bits(OperandClass::Feature) - self.io_feature_bits
    }

    /// Line-delimited JSON trace: `{kind, id, core, t0, t1, bits}`.
    pub fn trace_jsonl(&self) -> String {
        let mut out = String::new();
        let mut rows: Vec<(u64, serde_json::Value)> = Vec::new();
        for e in &self.exec {
            rows.push((
                e.t0,
                serde_json::json!({"kind": "exec", "id": e.tile, "core": e.core, "t0": e.t0, "t1": e.t1,
                    "bits": e.mapping.dram_bits(), "nest": e.mapping.nest.describe()}),
            ));
        }
        for t in &self.transfers {
            let id = t.tensor.map_or_else(|| "oversized".to_string(), |k| format!("{k:?}"));
            rows.push((
                t.t0,
                serde_json::json!({"kind": "xfer", "id": id, "core": t.core, "t0": t.t0, "t1": t.t1, "bits": t.bits,
                    "route": format!("{:?}", t.kind), "dram": t.via_dram}),
            ));
        }
        rows.sort_by_key(|(t, _)| *t);
        for (_, r) in rows {
            out.push_str(&r.to_string());
            out.push('\n');
        }
        out
    }

    /// CSV `component,operand,energy_fj`.
    pub fn breakdown_csv(&self) -> String {
        let mut out = String::from("component,operand,energy_fj\n");
        for c in Component::ALL {
            for k in OperandClass::ALL {
                out.push_str(&format!("{},{},{}\n", c.name(), k.name(), self.energy_of(c, k)));
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleOptions {
    pub prefetch: bool,
}

impl Default for ScheduleOptions {
    fn default() -> Self {
        ScheduleOptions { prefetch: true }
    }
}

/// Execution order of the non-input tiles: repeatedly the ready tile with
/// the smallest (first timestep, fusion stack, row band, operator).
pub fn scheduling_order(w: &WorkloadGraph, tg: &TileGraph) -> Vec<usize> {
    let preds = tg.predecessors();
    let mut succs = vec![Vec::new(); tg.tiles.len()];
    let mut missing = vec![0usize; tg.tiles.len()];
    for (t, ps) in preds.iter().enumerate() {
        for &p in ps {
            if w.nodes[tg.tiles[p].op].op_class != OpClass::InputSource {
                succs[p].push(t);
                missing[t] += 1;
            }
        }
    }
    let stacks = tg.cuts.fusion_stacks();
    let key = |t: usize| {
        let tile = &tg.tiles[t];
        Reverse((tile.t.start, stacks[w.nodes[tile.op].block_id], tile.s, tile.op, t))
    };
    let mut heap: BinaryHeap<_> = (0..tg.tiles.len())
        .filter(|&t| missing[t] == 0 && w.nodes[tg.tiles[t].op].op_class != OpClass::InputSource)
        .map(key)
        .collect();
    let mut order = Vec::with_capacity(tg.tiles.len());
    while let Some(Reverse((.., t))) = heap.pop() {
        order.push(t);
        for &s in &succs[t] {
            missing[s] -= 1;
            if missing[s] == 0 {
                heap.push(key(s));
            }
        }
    }
    order
}

/// Busy windows of an exclusive link, sorted and disjoint.
#[derive(Default)]
struct Calendar {
    busy: Vec<(u64, u64)>,
}

impl Calendar {
    /// Earliest start at or after `earliest` of a free window of `len` cycles.
    fn slot(&self, earliest: u64, len: u64) -> u64 {
        let mut t = earliest;
        let first = self.busy.partition_point(|&(_, b)| b <= earliest);
        for &(a, b) in &self.busy[first..] {
            if a >= t + len {
                break;
            }
            t = t.max(b);
        }
        t
    }

    fn book(&mut self, t0: u64, t1: u64) {
        if t1 > t0 {
            let i = self.busy.partition_point(|&(a, _)| a < t0);
            self.busy.insert(i, (t0, t1));
        }
    }

    fn reserve(&mut self, earliest: u64, len: u64) -> (u64, u64) {
        let t0 = self.slot(earliest, len);
        self.book(t0, t0 + len);
        (t0, t0 + len)
    }

    fn end(&self) -> u64 {
        self.busy.last().map_or(0, |b| b.1)
    }
}

struct CoreMem {
    cap: u64,
    used: u64,
    peak: u64,
    resident: BTreeSet<TensorKey>,
}

struct Sim<'a> {
    accel: &'a AcceleratorModel,
    opts: ScheduleOptions,
    tensors: HashMap<TensorKey, TensorInstance>,
    mem: Vec<CoreMem>,
    link: Calendar,
    noc: HashMap<(usize, usize), Calendar>,
    /// Cycle at which a tensor copy becomes usable on a core.
    avail: HashMap<(TensorKey, usize), u64>,
    core_free: Vec<u64>,
    core_last_start: Vec<u64>,
    io_tiles: Vec<bool>,
    res: ScheduleResult,
}

impl Sim<'_> {
    fn charge(&mut self, component: Component, class: OperandClass, fj: u64) {
        if fj > 0 {
            *self.res.energy.entry((component, class)).or_default() += fj;
        }
    }

    fn gb_energy(&self, core: usize) -> (u64, u64) {
        let c = &self.accel.cores[core];
        let g = &c.levels[c.global_level()];
        (g.e_rd_fj, g.e_wr_fj)
    }

    fn earliest(&self, core: usize) -> u64 {
        if self.opts.prefetch {
            self.core_last_start[core]
        } else {
            self.core_free[core]
        }
    }

    fn dram_transfer(&mut self, kind: TransferKind, key: Option<TensorKey>, core: usize, bits: u64, earliest: u64) -> u64 {
        let bw = self.accel.dram_link_bw(core);
        let (t0, t1) = self.link.reserve(earliest, bits.div_ceil(bw));
        self.res.dram_bits += bits;
        let class = key.map_or(OperandClass::Feature, |k| k.class());
        *self.res.dram_bits_by_class.entry(class).or_default() += bits;
        if let Some(TensorKey::Feature(t)) = key {
            if self.io_tiles[t] {
                self.res.io_feature_bits += bits;
            }
        }
        let (gb_rd, gb_wr) = self.gb_energy(core);
        let (d_rd, d_wr) = (self.accel.dram.e_rd_fj, self.accel.dram.e_wr_fj);
        let noc = self.accel.link(Endpoint::Core(core), Endpoint::Dram).map_or(0, |l| l.e_fj);
        if kind == TransferKind::Fetch {
            self.charge(Component::Dram, class, bits * d_rd);
            self.charge(Component::GlobalSram, class, bits * gb_wr);
        } else {
            self.charge(Component::GlobalSram, class, bits * gb_rd);
            self.charge(Component::Dram, class, bits * d_wr);
        }
        self.charge(Component::Noc, class, bits * noc);
        self.res.transfers.push(TransferRecord { kind, tensor: key, core, bits, t0, t1, via_dram: true });
        t1
    }

    fn noc_transfer(&mut self, key: TensorKey, from: usize, to: usize, bits: u64, earliest: u64) -> Result<u64> {
        let link = *self
            .accel
            .link(Endpoint::Core(from), Endpoint::Core(to))
            .ok_or_else(|| Error::Unschedulable { tensor: format!("{key:?}"), message: format!("no link core{from}->core{to}") })?;
        let earliest = earliest.max(self.avail.get(&(key, from)).copied().unwrap_or(0));
        let (t0, t1) = self.noc.entry((from.min(to), from.max(to))).or_default().reserve(earliest, bits.div_ceil(link.bw));
        let class = key.class();
        let (rd, _) = self.gb_energy(from);
        let (_, wr) = self.gb_energy(to);
        self.charge(Component::GlobalSram, class, bits * (rd + wr));
        self.charge(Component::Noc, class, bits * link.e_fj);
        self.res.transfers.push(TransferRecord { kind: TransferKind::Noc, tensor: Some(key), core: to, bits, t0, t1, via_dram: false });
        Ok(t1)
    }

    fn place(&mut self, key: TensorKey, core: usize, at: u64) {
        self.avail.insert((key, core), at);
        let bits = self.tensors[&key].bits;
        let m = &mut self.mem[core];
        if m.resident.insert(key) {
            m.used += bits;
            m.peak = m.peak.max(m.used);
            debug_assert!(m.used <= m.cap, "core{core} over capacity");
            self.tensors.get_mut(&key).unwrap().cores.push(core);
        }
    }

    fn drop_from(&mut self, key: TensorKey, core: usize) {
        let bits = self.tensors[&key].bits;
        self.avail.remove(&(key, core));
        let m = &mut self.mem[core];
        if m.resident.remove(&key) {
            m.used -= bits;
            self.tensors.get_mut(&key).unwrap().cores.retain(|&c| c != core);
        }
    }

    /// Removes `key` from `core`, writing it back first if it is still needed
    /// and this is its only copy.
    fn evict(&mut self, key: TensorKey, core: usize, earliest: u64) -> u64 {
        let t = &self.tensors[&key];
        let mut done = earliest;
        if t.priority > 0 && t.dirty && t.cores.len() == 1 {
            let bits = t.bits;
            let from = earliest.max(self.avail.get(&(key, core)).copied().unwrap_or(0));
            done = self.dram_transfer(TransferKind::WriteBack, Some(key), core, bits, from);
            self.tensors.get_mut(&key).unwrap().dirty = false;
        }
        self.drop_from(key, core);
        done
    }

    fn make_room(&mut self, core: usize, need: u64, pinned: &BTreeSet<TensorKey>, earliest: u64) -> u64 {
        let mut done = earliest;
        if self.mem[core].cap - self.mem[core].used >= need {
            return done;
        }
        let candidates: Vec<(TensorKey, u64, u64)> = self.mem[core]
            .resident
            .iter()
            .filter(|k| !pinned.contains(k))
            .map(|k| (*k, self.tensors[k].priority, self.tensors[k].bits))
            .collect();
        for key in evict_rank(&candidates) {
            if self.mem[core].cap - self.mem[core].used >= need {
                break;
            }
            done = done.max(self.evict(key, core, earliest));
        }
        done
    }

    fn release_if_done(&mut self, key: TensorKey) {
        if self.tensors.get(&key).is_some_and(|t| t.priority == 0) {
            for core in self.tensors[&key].cores.clone() {
                self.drop_from(key, core);
            }
            self.tensors.remove(&key);
        }
    }
}

fn component_of(accel: &AcceleratorModel, core: usize, loc: Loc) -> Component {
    match loc {
        Loc::Pe => Component::Pe,
        Loc::Dram => Component::Dram,
        Loc::Level(i) if i == accel.cores[core].global_level() => Component::GlobalSram,
        Loc::Level(_) => Component::LocalBuffers,
    }
}

/// Runs the tile graph on the accelerator. `allocation[op]` is the core of
/// each operator.
pub fn schedule(
    w: &WorkloadGraph,
    tg: &TileGraph,
    mapper: &Mapper,
    allocation: &[usize],
    opts: ScheduleOptions,
) -> Result<ScheduleResult> {
    let accel = mapper.accel();
    for (op, &core) in allocation.iter().enumerate() {
        if core >= accel.cores.len() {
            return Err(Error::UnknownCore { op: w.nodes[op].id.clone(), core });
        }
    }
    if allocation.len() != w.nodes.len() {
        return Err(Error::Internal(format!("allocation covers {} of {} operators", allocation.len(), w.nodes.len())));
    }
    let n_cores = accel.cores.len();
    let mut sim = Sim {
        accel,
        opts,
        tensors: HashMap::new(),
        mem: accel
            .cores
            .iter()
            .map(|c| CoreMem { cap: c.global_capacity_bits(), used: 0, peak: 0, resident: BTreeSet::new() })
            .collect(),
        link: Calendar::default(),
        noc: HashMap::new(),
        avail: HashMap::new(),
        core_free: vec![0; n_cores],
        core_last_start: vec![0; n_cores],
        io_tiles: tg
            .tiles
            .iter()
            .map(|t| w.nodes[t.op].op_class == OpClass::InputSource || w.consumers(t.op).next().is_none())
            .collect(),
        res: ScheduleResult::default(),
    };

    let preds = tg.predecessors();
    let mut inputs_of: Vec<Vec<usize>> = vec![Vec::new(); tg.tiles.len()];
    let mut consumers = vec![0u64; tg.tiles.len()];
    for e in &tg.data_edges {
        if !inputs_of[e.dst].contains(&e.src) {
            inputs_of[e.dst].push(e.src);
            consumers[e.src] += 1;
        }
    }
    for (t, tile) in tg.tiles.iter().enumerate() {
        if w.nodes[tile.op].op_class == OpClass::InputSource {
            sim.tensors.insert(
                TensorKey::Feature(t),
                TensorInstance { key: TensorKey::Feature(t), bits: tile.footprint.output, priority: consumers[t], dirty: false, cores: vec![] },
            );
        }
    }
    for (op, node) in w.nodes.iter().enumerate() {
        if node.op_class.has_weights() {
            let key = TensorKey::Weight { op, core: allocation[op] };
            let bits = node.weight_bits();
            sim.tensors.insert(key, TensorInstance { key, bits, priority: tg.op_tiles[op].len() as u64, dirty: false, cores: vec![] });
        }
    }
    let is_sink: Vec<bool> = (0..w.nodes.len()).map(|i| w.consumers(i).next().is_none()).collect();
    let mut tile_end = vec![0u64; tg.tiles.len()];

    for t in scheduling_order(w, tg) {
        let tile = &tg.tiles[t];
        let op = &w.nodes[tile.op];
        let core = allocation[tile.op];
        let cap = sim.mem[core].cap;
        let prev_state = (op.stateful && tile.tau > 0).then(|| TensorKey::State(tg.tile_at(tile.op, tile.s, tile.tau - 1)));
        let weight = op.op_class.has_weights().then_some(TensorKey::Weight { op: tile.op, core });
        let feature_in: Vec<TensorKey> = inputs_of[t].iter().map(|&p| TensorKey::Feature(p)).collect();
        let state_bits = tile.footprint.state;
        let out_bits = tile.footprint.output;
        let bits_of = |sim: &Sim, k: &TensorKey| sim.tensors.get(k).map_or(0, |x| x.bits);

        let mut groups: Vec<(OperandKind, u64, Vec<TensorKey>)> = Vec::new();
        if let Some(k) = weight {
            groups.push((OperandKind::Weight, bits_of(&sim, &k), vec![k]));
        }
        groups.push((OperandKind::InputFeature, feature_in.iter().map(|k| bits_of(&sim, k)).sum(), feature_in.clone()));
        if op.stateful {
            groups.push((OperandKind::AccumulatorState, state_bits, prev_state.into_iter().collect()));
        }
        groups.push((OperandKind::OutputFeature, out_bits, vec![]));
        let required: u64 = groups.iter().map(|g| g.1).sum();
        let preds_done = preds[t].iter().map(|&p| tile_end[p]).max().unwrap_or(0);

        let mut placement = Placement::default();
        let mut mapped = None;
        if required <= cap {
            let shape = TileShape::from_tile(w, tile, placement, cap, core)?;
            mapped = mapper.map(&shape).ok().map(|m| (shape, m));
        }
        if mapped.is_none() {
            let mut order: Vec<usize> = (0..groups.len()).collect();
            order.sort_by_key(|&i| (Reverse(groups[i].1), groups[i].0 as u8));
            let mut on_chip = required;
            let mut last_err = None;
            for i in order {
                placement.set(groups[i].0);
                on_chip -= groups[i].1;
                if on_chip > cap {
                    continue;
                }
                let shape = TileShape::from_tile(w, tile, placement, cap, core)?;
                match mapper.map(&shape) {
                    Ok(m) => {
                        mapped = Some((shape, m));
                        break;
                    }
                    Err(e) => last_err = Some(e),
                }
            }
            if mapped.is_none() {
                return Err(Error::Unschedulable {
                    tensor: format!("tile {} of {}", t, op.id),
                    message: last_err.map_or_else(|| "operands exceed the global buffer".into(), |e| e.to_string()),
                });
            }
        }
        let (shape, mapping) = mapped.unwrap();
        let oversized = placement.any();
        let on_chip_keys: BTreeSet<TensorKey> =
            groups.iter().filter(|g| !placement.off_chip(g.0)).flat_map(|g| g.2.iter().copied()).collect();
        let earliest = sim.earliest(core);
        let mut ready = earliest;

        if oversized {
            let all: Vec<TensorKey> = sim.mem[core].resident.iter().copied().collect();
            for key in all {
                if !on_chip_keys.contains(&key) {
                    ready = ready.max(sim.evict(key, core, earliest));
                }
            }
            // Off-chip operands must have a DRAM copy.
            for g in groups.iter().filter(|g| placement.off_chip(g.0)) {
                for key in &g.2 {
                    let tensor = &sim.tensors[key];
                    if tensor.dirty {
                        let holder = tensor.cores[0];
                        let bits = tensor.bits;
                        let from = earliest.max(sim.avail.get(&(*key, holder)).copied().unwrap_or(0));
                        ready = ready.max(sim.dram_transfer(TransferKind::WriteBack, Some(*key), holder, bits, from));
                        sim.tensors.get_mut(key).unwrap().dirty = false;
                    }
                }
            }
        }
        let new_bits = if placement.output { 0 } else { out_bits }
            + if op.stateful && prev_state.is_none() && !placement.state { state_bits } else { 0 };
        let missing: Vec<TensorKey> = on_chip_keys.iter().copied().filter(|k| !sim.tensors[k].cores.contains(&core)).collect();
        let need = missing.iter().map(|k| bits_of(&sim, k)).sum::<u64>() + new_bits;
        let room = sim.make_room(core, need, &on_chip_keys, earliest);
        ready = ready.max(room);
        for key in &on_chip_keys {
            if let Some(&at) = sim.avail.get(&(*key, core)) {
                ready = ready.max(at);
            }
        }
        for key in missing {
            let (bits, other) = {
                let x = &sim.tensors[&key];
                (x.bits, x.cores.first().copied())
            };
            let done = match other {
                Some(from) if from != core => sim.noc_transfer(key, from, core, bits, room)?,
                _ => sim.dram_transfer(TransferKind::Fetch, Some(key), core, bits, room),
            };
            sim.place(key, core, done);
            ready = ready.max(done);
        }

        let mut start = sim.core_free[core].max(preds_done).max(ready);
        if oversized {
            start = sim.link.slot(start, mapping.latency_cycles);
        }
        let end = start + mapping.latency_cycles;
        if oversized {
            sim.link.book(start, end);
            let bits = mapping.dram_bits();
            sim.res.dram_bits += bits;
            for a in mapping.accesses.iter().filter(|a| a.upper == Loc::Dram) {
                *sim.res.dram_bits_by_class.entry(OperandClass::of(Some(a.operand))).or_default() += a.down_bits + a.up_bits;
            }
            sim.res.transfers.push(TransferRecord { kind: TransferKind::Oversized, tensor: None, core, bits, t0: start, t1: end, via_dram: true });
            sim.res.oversized_tiles += 1;
        }
        for e in &mapping.breakdown {
            sim.charge(component_of(accel, core, e.loc), OperandClass::of(e.operand), e.fj);
        }
        sim.core_last_start[core] = start;
        sim.core_free[core] = end;
        tile_end[t] = end;

        // Consume inputs.
        for key in weight.iter().chain(&feature_in) {
            sim.tensors.get_mut(key).unwrap().priority -= 1;
            sim.release_if_done(*key);
        }
        // State carried to the next temporal slice.
        let last_slice = tile.t.end == w.total_timesteps;
        if op.stateful {
            let next = TensorKey::State(t);
            if let Some(prev) = prev_state {
                let old = sim.tensors.remove(&prev).unwrap();
                for c in &old.cores {
                    sim.avail.remove(&(prev, *c));
                    let m = &mut sim.mem[*c];
                    m.resident.remove(&prev);
                    m.used -= old.bits;
                }
            }
            if !last_slice {
                let instance = TensorInstance { key: next, bits: state_bits, priority: 1, dirty: !placement.state, cores: vec![] };
                sim.tensors.insert(next, instance);
                if !placement.state {
                    sim.place(next, core, end);
                }
            }
        }
        // Produced features.
        let key = TensorKey::Feature(t);
        sim.tensors.insert(key, TensorInstance { key, bits: out_bits, priority: consumers[t], dirty: !placement.output, cores: vec![] });
        if !placement.output {
            sim.place(key, core, end);
        }
        if is_sink[tile.op] && !placement.output {
            let done = sim.dram_transfer(TransferKind::SinkWrite, Some(key), core, out_bits, end);
            sim.res.latency_cycles = sim.res.latency_cycles.max(done);
            sim.tensors.get_mut(&key).unwrap().dirty = false;
        }
        sim.release_if_done(key);
        sim.res.exec.push(ExecRecord { tile: t, core, t0: start, t1: end, shape, mapping });
        sim.res.latency_cycles = sim.res.latency_cycles.max(end);
    }
    let mut res = sim.res;
    res.latency_cycles = res.latency_cycles.max(sim.link.end());
    res.peak_gb_bits = sim.mem.iter().map(|m| m.peak).collect();
    res.energy_fj = res.energy.values().sum();
    Ok(res)
}
