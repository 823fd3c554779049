//! SNN workloads as operator graphs with explicit neuron-state operands and a
//! time dimension.

mod builtin;
mod parse;

pub use builtin::{builtin_benchmark, micro, micro_with, red_lif, sew_resnet152, sew_resnet18, sew_resnet18_with, SEW18_CHANNELS};
pub use parse::{parse_workload, LayerDef, Pair, WorkloadFile};

use serde::{Deserialize, Serialize};
use std::fmt;

/// Bits per spike.
pub const SPIKE_BITS: u32 = 1;
/// Bits per non-spiking feature element.
pub const VALUE_BITS: u32 = 4;
pub const WEIGHT_BITS: u32 = 4;
/// Bits per neuron state element when stored in memory.
pub const STATE_BITS: u32 = 12;
/// Width of a PE accumulator; partial sums spill at this width.
pub const ACCUMULATOR_BITS: u32 = 16;

const VALID_PRECISIONS: [u32; 4] = [SPIKE_BITS, VALUE_BITS, STATE_BITS, ACCUMULATOR_BITS];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Axis {
    T,
    K,
    C,
    OY,
    OX,
    FY,
    FX,
}

impl Axis {
    pub const ALL: [Axis; 7] = [Axis::T, Axis::K, Axis::C, Axis::OY, Axis::OX, Axis::FY, Axis::FX];

    pub fn name(self) -> &'static str {
        match self {
            Axis::T => "T",
            Axis::K => "K",
            Axis::C => "C",
            Axis::OY => "OY",
            Axis::OX => "OX",
            Axis::FY => "FY",
            Axis::FX => "FX",
        }
    }

    pub fn from_name(s: &str) -> Option<Axis> {
        Axis::ALL.into_iter().find(|a| a.name().eq_ignore_ascii_case(s))
    }

    /// Reduction axes feed an accumulator; they never index an output.
    pub fn is_reduction(self) -> bool {
        matches!(self, Axis::C | Axis::FY | Axis::FX)
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dimension {
    pub axis: Axis,
    pub size: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OperandKind {
    Weight,
    InputFeature,
    OutputFeature,
    AccumulatorState,
    AuxState,
}

impl OperandKind {
    pub const ALL: [OperandKind; 5] = [
        OperandKind::Weight,
        OperandKind::InputFeature,
        OperandKind::OutputFeature,
        OperandKind::AccumulatorState,
        OperandKind::AuxState,
    ];

    pub fn is_state(self) -> bool {
        matches!(self, OperandKind::AccumulatorState | OperandKind::AuxState)
    }

    pub fn name(self) -> &'static str {
        match self {
            OperandKind::Weight => "weight",
            OperandKind::InputFeature => "input",
            OperandKind::OutputFeature => "output",
            OperandKind::AccumulatorState => "state",
            OperandKind::AuxState => "aux_state",
        }
    }

    pub fn from_name(s: &str) -> Option<OperandKind> {
        let s = s.to_ascii_lowercase();
        match s.as_str() {
            "weight" | "weights" | "w" => Some(OperandKind::Weight),
            "input" | "inputs" | "input_feature" | "i" => Some(OperandKind::InputFeature),
            "output" | "outputs" | "output_feature" | "o" => Some(OperandKind::OutputFeature),
            "state" | "states" | "accumulator_state" | "s" => Some(OperandKind::AccumulatorState),
            "aux_state" | "aux" => Some(OperandKind::AuxState),
            _ => None,
        }
    }
}

impl fmt::Display for OperandKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperandSpec {
    pub kind: OperandKind,
    /// Bits per element.
    pub precision: u32,
    pub relevant_axes: Vec<Axis>,
}

impl OperandSpec {
    pub fn is_relevant(&self, axis: Axis) -> bool {
        self.relevant_axes.contains(&axis)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LifParams {
    #[serde(alias = "alpha")]
    pub leak_alpha: f64,
    #[serde(alias = "v_thr")]
    pub v_threshold: f64,
    pub i_reset: f64,
}

impl Default for LifParams {
    fn default() -> Self {
        LifParams { leak_alpha: 0.9, v_threshold: 1.0, i_reset: 1.0 }
    }
}

/// One discrete LIF update: leak, integrate, reset by subtraction, then fire.
pub fn lif_step(state: f64, input_current: f64, params: &LifParams, prev_spike: bool) -> (f64, bool) {
    let reset = if prev_spike { params.i_reset } else { 0.0 };
    let v = params.leak_alpha * state + input_current - reset;
    (v, v >= params.v_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum OpClass {
    Conv2D,
    Pointwise,
    ElementwiseAdd,
    ElementwiseOr,
    MaxPool,
    InputSource,
}

impl OpClass {
    pub fn from_name(s: &str) -> Option<OpClass> {
        match s.to_ascii_lowercase().as_str() {
            "conv2d" | "conv" => Some(OpClass::Conv2D),
            "pointwise" | "conv1x1" => Some(OpClass::Pointwise),
            "add" | "elementwise_add" | "elementwiseadd" => Some(OpClass::ElementwiseAdd),
            "or" | "elementwise_or" | "elementwiseor" | "sew_or" => Some(OpClass::ElementwiseOr),
            "maxpool" | "max_pool" | "pool" => Some(OpClass::MaxPool),
            "input" | "input_source" | "inputsource" => Some(OpClass::InputSource),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            OpClass::Conv2D => "conv2d",
            OpClass::Pointwise => "pointwise",
            OpClass::ElementwiseAdd => "add",
            OpClass::ElementwiseOr => "or",
            OpClass::MaxPool => "maxpool",
            OpClass::InputSource => "input",
        }
    }

    pub fn has_weights(self) -> bool {
        matches!(self, OpClass::Conv2D | OpClass::Pointwise)
    }

    pub fn is_elementwise(self) -> bool {
        matches!(self, OpClass::ElementwiseAdd | OpClass::ElementwiseOr)
    }
}

/// Affine map from output coordinates to input coordinates along Y and X.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Projection {
    pub stride_y: u64,
    pub stride_x: u64,
    pub pad_y: u64,
    pub pad_x: u64,
    pub kernel_y: u64,
    pub kernel_x: u64,
}

impl Projection {
    pub const IDENTITY: Projection =
        Projection { stride_y: 1, stride_x: 1, pad_y: 0, pad_x: 0, kernel_y: 1, kernel_x: 1 };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FeatureShape {
    pub channels: u64,
    pub height: u64,
    pub width: u64,
}

impl FeatureShape {
    pub fn elements(&self) -> u64 {
        self.channels * self.height * self.width
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorNode {
    pub id: String,
    pub op_class: OpClass,
    pub dims: Vec<Dimension>,
    pub operands: Vec<OperandSpec>,
    pub projection: Projection,
    pub stateful: bool,
    pub lif: Option<LifParams>,
    pub block_id: usize,
    /// Producer node indices, in operand order.
    pub inputs: Vec<usize>,
    /// Output features are 1-bit spikes.
    pub spiking: bool,
    pub input_shape: FeatureShape,
    pub output_shape: FeatureShape,
}

impl OperatorNode {
    /// Size of `axis`, or 1 when the operator does not carry it.
    pub fn dim(&self, axis: Axis) -> u64 {
        self.dims.iter().find(|d| d.axis == axis).map_or(1, |d| d.size)
    }

    pub fn has_axis(&self, axis: Axis) -> bool {
        self.dims.iter().any(|d| d.axis == axis)
    }

    pub fn operand(&self, kind: OperandKind) -> Option<&OperandSpec> {
        self.operands.iter().find(|o| o.kind == kind)
    }

    /// Ops per timestep: MACs/SOPs for weighted layers, one per output element otherwise.
    pub fn ops_per_timestep(&self) -> u64 {
        let out = self.dim(Axis::K) * self.dim(Axis::OY) * self.dim(Axis::OX);
        match self.op_class {
            OpClass::Conv2D | OpClass::Pointwise => {
                out * self.dim(Axis::C) * self.dim(Axis::FY) * self.dim(Axis::FX)
            }
            OpClass::InputSource => 0,
            _ => out,
        }
    }

    pub fn weight_bits(&self) -> u64 {
        self.operand(OperandKind::Weight).map_or(0, |w| {
            w.relevant_axes.iter().map(|a| self.dim(*a)).product::<u64>() * w.precision as u64
        })
    }

    /// Number of stored state elements (neurons), zero for stateless operators.
    pub fn state_elements(&self) -> u64 {
        self.operand(OperandKind::AccumulatorState)
            .map_or(0, |s| s.relevant_axes.iter().map(|a| self.dim(*a)).product())
    }

    pub fn output_precision(&self) -> u32 {
        if self.spiking {
            SPIKE_BITS
        } else {
            VALUE_BITS
        }
    }

    pub fn input_precision(&self) -> u32 {
        self.operand(OperandKind::InputFeature).map_or(0, |o| o.precision)
    }

    /// Bits of one timestep of output features.
    pub fn output_bits_per_timestep(&self) -> u64 {
        self.output_shape.elements() * self.output_precision() as u64
    }

    /// Inputs are spikes, so accumulation is priced as a synaptic operation.
    pub fn uses_sop(&self) -> bool {
        self.input_precision() == SPIKE_BITS
    }
}

/// Dimensions carried by an operator of `class`.
pub(crate) fn operator_dims(class: OpClass, t: u64, input: FeatureShape, output: FeatureShape, proj: &Projection) -> Vec<Dimension> {
    let d = |axis, size| Dimension { axis, size };
    let mut dims = vec![d(Axis::T, t), d(Axis::K, output.channels)];
    if class.has_weights() {
        dims.push(d(Axis::C, input.channels));
    }
    dims.push(d(Axis::OY, output.height));
    dims.push(d(Axis::OX, output.width));
    if class.has_weights() || class == OpClass::MaxPool {
        dims.push(d(Axis::FY, proj.kernel_y));
        dims.push(d(Axis::FX, proj.kernel_x));
    }
    dims
}

/// Operand set for an operator under the global precision plan.
pub(crate) fn operator_operands(class: OpClass, stateful: bool, input_spiking: bool, output_spiking: bool) -> Vec<OperandSpec> {
    use Axis::*;
    let spec = |kind, precision, axes: &[Axis]| OperandSpec { kind, precision, relevant_axes: axes.to_vec() };
    let in_bits = if input_spiking { SPIKE_BITS } else { VALUE_BITS };
    let out_bits = if output_spiking { SPIKE_BITS } else { VALUE_BITS };
    let mut ops = Vec::new();
    match class {
        OpClass::Conv2D | OpClass::Pointwise => {
            ops.push(spec(OperandKind::Weight, WEIGHT_BITS, &[K, C, FY, FX]));
            ops.push(spec(OperandKind::InputFeature, in_bits, &[T, C, OY, OX, FY, FX]));
        }
        OpClass::MaxPool => ops.push(spec(OperandKind::InputFeature, in_bits, &[T, K, OY, OX, FY, FX])),
        OpClass::ElementwiseAdd | OpClass::ElementwiseOr => {
            ops.push(spec(OperandKind::InputFeature, in_bits, &[T, K, OY, OX]))
        }
        OpClass::InputSource => {}
    }
    ops.push(spec(OperandKind::OutputFeature, out_bits, &[T, K, OY, OX]));
    if stateful {
        ops.push(spec(OperandKind::AccumulatorState, STATE_BITS, &[K, OY, OX]));
    }
    ops
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorkloadGraph {
    pub name: String,
    /// Nodes in topological order; indices are stable identifiers.
    pub nodes: Vec<OperatorNode>,
    /// Producer -> consumer feature edges.
    pub edges: Vec<(usize, usize)>,
    pub total_timesteps: u64,
}

/// Per-block and total stored neuron-state element counts.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateCounts {
    pub per_block: Vec<u64>,
    pub total: u64,
}

impl WorkloadGraph {
    pub fn n_blocks(&self) -> usize {
        self.nodes.iter().map(|n| n.block_id + 1).max().unwrap_or(0)
    }

    pub fn consumers(&self, node: usize) -> impl Iterator<Item = usize> + '_ {
        self.edges.iter().filter(move |(p, _)| *p == node).map(|(_, c)| *c)
    }

    pub fn block_nodes(&self, block: usize) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().enumerate().filter(move |(_, n)| n.block_id == block).map(|(i, _)| i)
    }

    pub fn node_index(&self, id: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.id == id)
    }

    /// Nodes whose outputs leave the network.
    pub fn sinks(&self) -> Vec<usize> {
        (0..self.nodes.len()).filter(|&i| self.consumers(i).next().is_none()).collect()
    }

    pub fn validate(&self) -> crate::Result<()> {
        validate_graph(self)
    }

    /// Weights plus stored states, in bits.
    pub fn block_memory_bits(&self, block: usize) -> u64 {
        self.block_nodes(block)
            .map(|i| {
                let n = &self.nodes[i];
                n.weight_bits() + n.state_elements() * STATE_BITS as u64
            })
            .sum()
    }

    /// Output features of the block's operators for one timestep, in bits.
    pub fn block_feature_bits(&self, block: usize) -> u64 {
        self.block_nodes(block).map(|i| self.nodes[i].output_bits_per_timestep()).sum()
    }
}

pub fn count_neuron_states(w: &WorkloadGraph) -> StateCounts {
    let mut per_block = vec![0u64; w.n_blocks()];
    for n in &w.nodes {
        per_block[n.block_id] += n.state_elements();
    }
    let total = per_block.iter().sum();
    StateCounts { per_block, total }
}

/// Removes stored neuron state from every operator in blocks before
/// `keep_from_block`. Spiking outputs and topology are unchanged.
pub fn strip_states(w: &WorkloadGraph, keep_from_block: usize) -> WorkloadGraph {
    let mut out = w.clone();
    for n in out.nodes.iter_mut().filter(|n| n.block_id < keep_from_block) {
        n.stateful = false;
        n.operands.retain(|o| !o.kind.is_state());
    }
    if keep_from_block > 0 {
        out.name = format!("{}-strip{}", w.name, keep_from_block);
    }
    out
}

fn validate_graph(w: &WorkloadGraph) -> crate::Result<()> {
    use crate::Error;
    let mismatch = |node: &OperatorNode, field: &str, message: String| Error::ShapeMismatch {
        node: node.id.clone(),
        field: field.to_string(),
        message,
    };
    let temporal = w.total_timesteps > 1 || w.nodes.iter().any(|n| n.has_axis(Axis::T));
    let mut prev_block = 0usize;
    for (i, n) in w.nodes.iter().enumerate() {
        for (j, d) in n.dims.iter().enumerate() {
            if d.size == 0 {
                return Err(mismatch(n, d.axis.name(), "dimension size must be >= 1".into()));
            }
            if n.dims[..j].iter().any(|e| e.axis == d.axis) {
                return Err(mismatch(n, d.axis.name(), "axis appears twice".into()));
            }
        }
        if temporal && n.dim(Axis::T) != w.total_timesteps {
            return Err(mismatch(n, "T", format!("expected {} timesteps", w.total_timesteps)));
        }
        for o in &n.operands {
            if !VALID_PRECISIONS.contains(&o.precision) {
                return Err(mismatch(n, o.kind.name(), format!("precision {} not allowed", o.precision)));
            }
            if let Some(a) = o.relevant_axes.iter().find(|a| !n.has_axis(**a)) {
                return Err(mismatch(n, o.kind.name(), format!("relevant axis {a} missing on operator")));
            }
            if o.kind == OperandKind::AccumulatorState
                && o.relevant_axes.iter().any(|a| a.is_reduction() || *a == Axis::T)
            {
                return Err(mismatch(n, "state", "state must be indexed by output neurons only".into()));
            }
        }
        if n.stateful != n.operand(OperandKind::AccumulatorState).is_some() {
            return Err(mismatch(n, "stateful", "stateful flag disagrees with operands".into()));
        }
        if !n.op_class.has_weights() && n.operand(OperandKind::Weight).is_some() {
            return Err(mismatch(n, "weight", "operator class carries no weights".into()));
        }
        let p = &n.projection;
        if p.stride_y == 0 || p.stride_x == 0 {
            return Err(mismatch(n, "stride", "stride must be >= 1".into()));
        }
        if n.op_class == OpClass::InputSource {
            if !n.inputs.is_empty() {
                return Err(mismatch(n, "inputs", "input source takes no inputs".into()));
            }
        } else if n.inputs.is_empty() {
            return Err(mismatch(n, "inputs", "operator has no producer".into()));
        }
        for &p in &n.inputs {
            if p >= i {
                return Err(Error::CycleDetected { node: n.id.clone() });
            }
        }
        if n.block_id != prev_block && n.block_id != prev_block + 1 && i > 0 {
            return Err(mismatch(n, "block", format!("block ids must be contiguous (after {prev_block})")));
        }
        if i == 0 && n.block_id != 0 {
            return Err(mismatch(n, "block", "first block id must be 0".into()));
        }
        prev_block = n.block_id;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lif_zero_dynamics() {
        let p = LifParams { leak_alpha: 0.5, v_threshold: 1.0, i_reset: 1.0 };
        assert_eq!(lif_step(0.0, 0.0, &p, false), (0.0, false));
        let p0 = LifParams { v_threshold: 0.0, ..p };
        assert_eq!(lif_step(0.0, 0.0, &p0, false), (0.0, true));
    }

    #[test]
    fn lif_fire_then_reset_by_subtraction() {
        let p = LifParams { leak_alpha: 1.0, v_threshold: 1.0, i_reset: 1.0 };
        let (v, s) = lif_step(0.6, 0.6, &p, false);
        assert!((v - 1.2).abs() < 1e-12);
        assert!(s);
        let (v, s) = lif_step(1.2, 0.0, &p, true);
        assert!((v - 0.2).abs() < 1e-12);
        assert!(!s);
    }

    #[test]
    fn lif_without_leak_or_threshold_accumulates() {
        let p = LifParams { leak_alpha: 1.0, v_threshold: f64::INFINITY, i_reset: 1.0 };
        let xs = [0.25, -1.5, 3.0, 0.125, 7.0];
        let mut v = 0.0;
        let mut spike = false;
        for x in xs {
            (v, spike) = lif_step(v, x, &p, spike);
        }
        assert!(!spike);
        assert_eq!(v, xs.iter().sum::<f64>());
    }

    #[test]
    fn axis_and_kind_names_round_trip() {
        for a in Axis::ALL {
            assert_eq!(Axis::from_name(a.name()), Some(a));
        }
        for k in OperandKind::ALL {
            assert_eq!(OperandKind::from_name(k.name()), Some(k));
        }
    }
}
