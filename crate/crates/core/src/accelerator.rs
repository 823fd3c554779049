//! Hardware model: cores with PE arrays and memory hierarchies, NoC links and
//! an exclusive external DRAM.

use serde::Deserialize;

use crate::workload::{Axis, OperandKind};
use crate::{Error, Result};

pub const BITS_PER_KB: u64 = 8 * 1024;
pub const GLOBAL_BANK_BYTES: u64 = 128 * 1024;

/// Parent of a memory level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LevelId {
    Level(usize),
    Dram,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryLevel {
    pub name: String,
    pub capacity_bits: u64,
    pub bw_rd: u64,
    pub bw_wr: u64,
    pub e_rd_fj: u64,
    pub e_wr_fj: u64,
    pub serves: Vec<OperandKind>,
    pub above: LevelId,
    pub banks: u64,
}

impl MemoryLevel {
    pub fn serves(&self, kind: OperandKind) -> bool {
        self.serves.contains(&kind)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PeArray {
    pub rows: u64,
    pub cols: u64,
    pub row_axis: Axis,
    pub col_axis: Axis,
    pub e_mac_fj: u64,
    pub e_sop_fj: u64,
    pub accumulator_bits: u32,
}

impl PeArray {
    pub fn size(&self) -> u64 {
        self.rows * self.cols
    }

    /// Array extent bound to `axis`, 1 when unbound.
    pub fn extent(&self, axis: Axis) -> u64 {
        if axis == self.row_axis {
            self.rows
        } else if axis == self.col_axis {
            self.cols
        } else {
            1
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Core {
    pub id: usize,
    pub pe: PeArray,
    pub levels: Vec<MemoryLevel>,
}

impl Core {
    /// Index of the level directly below DRAM (the shared global buffer).
    pub fn global_level(&self) -> usize {
        self.levels.iter().rposition(|l| l.above == LevelId::Dram).expect("validated core has a top level")
    }

    /// On-chip levels holding `kind`, innermost first, ending at the global buffer.
    pub fn chain(&self, kind: OperandKind) -> Vec<usize> {
        let Some(mut cur) = self.levels.iter().position(|l| l.serves(kind)) else {
            return Vec::new();
        };
        let mut out = vec![cur];
        while let LevelId::Level(next) = self.levels[cur].above {
            if self.levels[next].serves(kind) {
                out.push(next);
            }
            cur = next;
        }
        out
    }

    pub fn global_capacity_bits(&self) -> u64 {
        self.levels[self.global_level()].capacity_bits
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DramSpec {
    pub e_rd_fj: u64,
    pub e_wr_fj: u64,
    pub link_bw: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Endpoint {
    Core(usize),
    Dram,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NocLink {
    pub a: Endpoint,
    pub b: Endpoint,
    pub bw: u64,
    pub e_fj: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcceleratorModel {
    pub name: String,
    pub cores: Vec<Core>,
    pub dram: DramSpec,
    pub noc: Vec<NocLink>,
    pub dram_exclusive: bool,
}

impl AcceleratorModel {
    /// Link between two endpoints in either direction.
    pub fn link(&self, a: Endpoint, b: Endpoint) -> Option<&NocLink> {
        self.noc.iter().find(|l| (l.a == a && l.b == b) || (l.a == b && l.b == a))
    }

    pub fn dram_link_bw(&self, core: usize) -> u64 {
        self.link(Endpoint::Core(core), Endpoint::Dram).map_or(self.dram.link_bw, |l| l.bw)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidAccelerator(m));
        if self.cores.is_empty() {
            return bad("no cores".into());
        }
        if !self.dram_exclusive {
            return bad("DRAM access must be exclusive".into());
        }
        if self.dram.link_bw == 0 {
            return bad("dram link bandwidth must be positive".into());
        }
        for core in &self.cores {
            if core.pe.size() == 0 {
                return bad(format!("core{}: empty PE array", core.id));
            }
            for axis in [core.pe.row_axis, core.pe.col_axis] {
                if !matches!(axis, Axis::K | Axis::OY | Axis::OX) {
                    return bad(format!("core{}: PE binding {} is not an output axis", core.id, axis.name()));
                }
            }
            if core.pe.row_axis == core.pe.col_axis {
                return bad(format!("core{}: both PE dimensions bound to {}", core.id, core.pe.row_axis.name()));
            }
            if core.levels.is_empty() {
                return bad(format!("core{}: no memory levels", core.id));
            }
            for (i, l) in core.levels.iter().enumerate() {
                if l.capacity_bits == 0 {
                    return bad(format!("core{}: level {} has zero capacity", core.id, l.name));
                }
                if l.bw_rd == 0 || l.bw_wr == 0 {
                    return bad(format!("core{}: level {} has zero bandwidth", core.id, l.name));
                }
                let mut cur = i;
                let mut steps = 0;
                while let LevelId::Level(next) = core.levels[cur].above {
                    if next >= core.levels.len() || steps > core.levels.len() {
                        return bad(format!("core{}: level {} does not reach DRAM", core.id, l.name));
                    }
                    cur = next;
                    steps += 1;
                }
            }
            let tops = core.levels.iter().filter(|l| l.above == LevelId::Dram).count();
            if tops != 1 {
                return bad(format!("core{}: expected one level below DRAM, found {tops}", core.id));
            }
            for kind in [OperandKind::Weight, OperandKind::InputFeature, OperandKind::OutputFeature, OperandKind::AccumulatorState] {
                if !core.levels.iter().any(|l| l.serves(kind)) {
                    return bad(format!("core{}: no level serves {}", core.id, kind.name()));
                }
            }
        }
        Ok(())
    }
}

/// Single-core Meta-VR style model with a global buffer of `global_buffer_bytes`.
pub fn builtin_meta_vr(global_buffer_bytes: u64) -> Result<AcceleratorModel> {
    if global_buffer_bytes == 0 {
        return Err(Error::InvalidAccelerator("global buffer size must be positive".into()));
    }
    let level = |name: &str, bytes: u64, bw: u64, e_rd, e_wr, serves: Vec<OperandKind>, above| MemoryLevel {
        name: name.into(),
        capacity_bits: bytes * 8,
        bw_rd: bw,
        bw_wr: bw,
        e_rd_fj: e_rd,
        e_wr_fj: e_wr,
        serves,
        above,
        banks: 1,
    };
    let mut global = level("global", global_buffer_bytes, 256, 130, 170, ALL_KINDS.to_vec(), LevelId::Dram);
    global.banks = global_buffer_bytes.div_ceil(GLOBAL_BANK_BYTES);
    let core = Core {
        id: 0,
        pe: PeArray {
            rows: 16,
            cols: 32,
            row_axis: Axis::OX,
            col_axis: Axis::K,
            e_mac_fj: 160,
            e_sop_fj: 70,
            accumulator_bits: 16,
        },
        levels: vec![
            level("lb_input", 32 * 1024, 128, 100, 120, vec![OperandKind::InputFeature], LevelId::Level(2)),
            level("lb_weight", 16 * 1024, 128, 100, 120, vec![OperandKind::Weight], LevelId::Level(2)),
            global,
        ],
    };
    let model = AcceleratorModel {
        name: "meta_vr".into(),
        cores: vec![core],
        dram: DramSpec { e_rd_fj: 11_000, e_wr_fj: 12_000, link_bw: 32 },
        noc: vec![NocLink { a: Endpoint::Core(0), b: Endpoint::Dram, bw: 32, e_fj: 0 }],
        dram_exclusive: true,
    };
    model.validate()?;
    Ok(model)
}

const ALL_KINDS: [OperandKind; 5] = [
    OperandKind::Weight,
    OperandKind::InputFeature,
    OperandKind::OutputFeature,
    OperandKind::AccumulatorState,
    OperandKind::AuxState,
];

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct AccelFile {
    name: Option<String>,
    cores: Vec<CoreDef>,
    dram: Option<DramDef>,
    #[serde(default)]
    noc: Vec<LinkDef>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CoreDef {
    pe: PeDef,
    levels: Vec<LevelDef>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PeDef {
    rows: u64,
    cols: u64,
    bindings: [String; 2],
    e_mac_fj: u64,
    e_sop_fj: u64,
    #[serde(default = "default_acc_bits")]
    accumulator_bits: u32,
}

fn default_acc_bits() -> u32 {
    16
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LevelDef {
    name: String,
    kb: f64,
    bw_rd: u64,
    bw_wr: u64,
    e_rd_fj_bit: u64,
    e_wr_fj_bit: u64,
    serves: Vec<String>,
    above: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct DramDef {
    e_rd_fj_bit: u64,
    e_wr_fj_bit: u64,
    link_bw: u64,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct LinkDef {
    a: String,
    b: String,
    bw: u64,
    #[serde(default)]
    e_fj_bit: u64,
}

fn endpoint(name: &str, n_cores: usize) -> Result<Endpoint> {
    if name.eq_ignore_ascii_case("dram") {
        return Ok(Endpoint::Dram);
    }
    name.strip_prefix("core")
        .and_then(|i| i.parse::<usize>().ok())
        .filter(|&i| i < n_cores)
        .map(Endpoint::Core)
        .ok_or_else(|| Error::InvalidAccelerator(format!("unknown NoC endpoint {name}")))
}

/// Parses a TOML accelerator description.
pub fn parse_accelerator(text: &str) -> Result<AcceleratorModel> {
    let file: AccelFile = toml::from_str(text).map_err(|e| Error::Parse {
        location: e.span().map_or_else(|| "accelerator".into(), |s| format!("byte {}", s.start)),
        message: e.message().to_string(),
    })?;
    let dram = file.dram.ok_or_else(|| Error::InvalidAccelerator("missing dram".into()))?;
    let mut cores = Vec::new();
    for (id, c) in file.cores.into_iter().enumerate() {
        let axis = |s: &str| {
            Axis::from_name(s).ok_or_else(|| Error::InvalidAccelerator(format!("core{id}: unknown PE binding {s}")))
        };
        let pe = PeArray {
            rows: c.pe.rows,
            cols: c.pe.cols,
            row_axis: axis(&c.pe.bindings[0])?,
            col_axis: axis(&c.pe.bindings[1])?,
            e_mac_fj: c.pe.e_mac_fj,
            e_sop_fj: c.pe.e_sop_fj,
            accumulator_bits: c.pe.accumulator_bits,
        };
        let names: Vec<String> = c.levels.iter().map(|l| l.name.clone()).collect();
        let last = c.levels.len().saturating_sub(1);
        let mut levels = Vec::new();
        for (i, l) in c.levels.into_iter().enumerate() {
            let mut serves = Vec::new();
            for s in &l.serves {
                if s == "all" {
                    serves.extend(ALL_KINDS);
                } else {
                    serves.push(OperandKind::from_name(s).ok_or_else(|| {
                        Error::InvalidAccelerator(format!("core{id}: level {} serves unknown operand {s}", l.name))
                    })?);
                }
            }
            let above = match l.above.as_deref() {
                Some(a) if a.eq_ignore_ascii_case("dram") => LevelId::Dram,
                Some(a) => LevelId::Level(names.iter().position(|n| n == a).ok_or_else(|| {
                    Error::InvalidAccelerator(format!("core{id}: level {} has unknown parent {a}", l.name))
                })?),
                None if i == last => LevelId::Dram,
                None => LevelId::Level(last),
            };
            if above == LevelId::Level(i) {
                return Err(Error::InvalidAccelerator(format!("core{id}: level {} is its own parent", l.name)));
            }
            if !(l.kb.is_finite() && l.kb >= 0.0) {
                return Err(Error::InvalidAccelerator(format!("core{id}: level {} has invalid size", l.name)));
            }
            let capacity_bits = (l.kb * BITS_PER_KB as f64).round() as u64;
            let banks = if above == LevelId::Dram { (capacity_bits / 8).div_ceil(GLOBAL_BANK_BYTES).max(1) } else { 1 };
            levels.push(MemoryLevel {
                name: l.name,
                capacity_bits,
                bw_rd: l.bw_rd,
                bw_wr: l.bw_wr,
                e_rd_fj: l.e_rd_fj_bit,
                e_wr_fj: l.e_wr_fj_bit,
                serves,
                above,
                banks,
            });
        }
        cores.push(Core { id, pe, levels });
    }
    let n = cores.len();
    let mut noc = Vec::new();
    for l in &file.noc {
        noc.push(NocLink { a: endpoint(&l.a, n)?, b: endpoint(&l.b, n)?, bw: l.bw, e_fj: l.e_fj_bit });
    }
    for i in 0..n {
        if !noc.iter().any(|l| (l.a == Endpoint::Core(i) && l.b == Endpoint::Dram) || (l.b == Endpoint::Core(i) && l.a == Endpoint::Dram)) {
            noc.push(NocLink { a: Endpoint::Core(i), b: Endpoint::Dram, bw: dram.link_bw, e_fj: 0 });
        }
    }
    let model = AcceleratorModel {
        name: file.name.unwrap_or_else(|| "accelerator".into()),
        cores,
        dram: DramSpec { e_rd_fj: dram.e_rd_fj_bit, e_wr_fj: dram.e_wr_fj_bit, link_bw: dram.link_bw },
        noc,
        dram_exclusive: true,
    };
    model.validate()?;
    Ok(model)
}
