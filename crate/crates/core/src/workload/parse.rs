use super::{
    operator_dims, operator_operands, FeatureShape, LifParams, OpClass, OperatorNode, Projection, WorkloadGraph,
};
use crate::{Error, Result};
use serde::{Deserialize, Serialize};
use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap};

/// A scalar applied to both spatial axes, or an explicit `[y, x]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Pair {
    Same(u64),
    YX([u64; 2]),
}

impl Pair {
    pub fn yx(self) -> (u64, u64) {
        match self {
            Pair::Same(v) => (v, v),
            Pair::YX([y, x]) => (y, x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerDef {
    pub id: String,
    pub class: String,
    #[serde(default)]
    pub inputs: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_channels: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kernel: Option<Pair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stride: Option<Pair>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub padding: Option<Pair>,
    #[serde(default)]
    pub stateful: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lif: Option<LifParams>,
    #[serde(default)]
    pub block: usize,
    /// Output features are spikes. Defaults: inputs and LIF layers spike,
    /// elementwise ops and pools spike iff all their inputs do.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spiking: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub channels: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub height: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub width: Option<u64>,
}

impl LayerDef {
    pub fn new(id: impl Into<String>, class: &str) -> Self {
        LayerDef {
            id: id.into(),
            class: class.to_string(),
            inputs: Vec::new(),
            out_channels: None,
            kernel: None,
            stride: None,
            padding: None,
            stateful: false,
            lif: None,
            block: 0,
            spiking: None,
            channels: None,
            height: None,
            width: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadFile {
    #[serde(default)]
    pub name: Option<String>,
    pub timesteps: u64,
    pub layers: Vec<LayerDef>,
}

/// Parses a TOML (or JSON) workload document into a validated graph.
pub fn parse_workload(text: &str) -> Result<WorkloadGraph> {
    let file: WorkloadFile = if text.trim_start().starts_with('{') {
        serde_json::from_str(text).map_err(|e| Error::Parse {
            location: format!("line {}", e.line()),
            message: e.to_string(),
        })?
    } else {
        toml::from_str(text).map_err(|e| Error::Parse {
            location: e.span().map_or("document".to_string(), |s| format!("{}..{}", s.start, s.end)),
            message: e.message().to_string(),
        })?
    };
    file.build()
}

impl WorkloadFile {
    pub fn build(&self) -> Result<WorkloadGraph> {
        let name = self.name.clone().unwrap_or_else(|| "workload".to_string());
        if self.timesteps == 0 {
            return Err(Error::Parse { location: "timesteps".into(), message: "must be >= 1".into() });
        }
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut classes = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            if index.insert(l.id.as_str(), i).is_some() {
                return Err(Error::DuplicateNode { node: l.id.clone() });
            }
            let class = OpClass::from_name(&l.class)
                .ok_or_else(|| Error::UnknownOpClass { node: l.id.clone(), class: l.class.clone() })?;
            classes.push(class);
        }
        let mut preds: Vec<Vec<usize>> = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            let mut p = Vec::with_capacity(l.inputs.len());
            for src in &l.inputs {
                let j = *index.get(src.as_str()).ok_or_else(|| Error::Parse {
                    location: format!("layer '{}' field 'inputs'", l.id),
                    message: format!("unknown producer '{src}'"),
                })?;
                p.push(j);
            }
            preds.push(p);
        }
        let order = topo_order(&self.layers, &preds)?;
        let mut new_index = vec![0usize; self.layers.len()];
        for (pos, &old) in order.iter().enumerate() {
            new_index[old] = pos;
        }

        let mut nodes: Vec<OperatorNode> = Vec::with_capacity(self.layers.len());
        let mut edges = Vec::new();
        for &old in &order {
            let l = &self.layers[old];
            let inputs: Vec<usize> = preds[old].iter().map(|&p| new_index[p]).collect();
            let node = build_node(l, classes[old], &inputs, &nodes, self.timesteps)?;
            for &p in &inputs {
                edges.push((p, nodes.len()));
            }
            nodes.push(node);
        }
        let g = WorkloadGraph { name, nodes, edges, total_timesteps: self.timesteps };
        g.validate()?;
        Ok(g)
    }
}

fn topo_order(layers: &[LayerDef], preds: &[Vec<usize>]) -> Result<Vec<usize>> {
    let n = layers.len();
    let mut indeg: Vec<usize> = preds.iter().map(Vec::len).collect();
    let mut succ = vec![Vec::new(); n];
    for (c, ps) in preds.iter().enumerate() {
        for &p in ps {
            succ[p].push(c);
        }
    }
    let mut ready: BinaryHeap<Reverse<usize>> = (0..n).filter(|&i| indeg[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(i)) = ready.pop() {
        order.push(i);
        for &c in &succ[i] {
            indeg[c] -= 1;
            if indeg[c] == 0 {
                ready.push(Reverse(c));
            }
        }
    }
    if order.len() == n {
        return Ok(order);
    }
    // Report the earliest-declared node that lies on a cycle.
    let on_cycle = (0..n).filter(|&i| indeg[i] > 0).find(|&start| reaches(start, start, &succ, &indeg));
    let node = on_cycle.or_else(|| (0..n).find(|&i| indeg[i] > 0)).unwrap_or(0);
    Err(Error::CycleDetected { node: layers[node].id.clone() })
}

fn reaches(from: usize, target: usize, succ: &[Vec<usize>], indeg: &[usize]) -> bool {
    let mut seen = vec![false; succ.len()];
    let mut stack: Vec<usize> = succ[from].clone();
    while let Some(v) = stack.pop() {
        if v == target {
            return true;
        }
        if seen[v] || indeg[v] == 0 {
            continue;
        }
        seen[v] = true;
        stack.extend(succ[v].iter().copied());
    }
    false
}

fn conv_out(input: u64, pad: u64, kernel: u64, stride: u64) -> Option<u64> {
    let padded = input + 2 * pad;
    (padded >= kernel).then(|| (padded - kernel) / stride + 1)
}

/// Ceil-mode pooling output; a window larger than the input yields one row.
fn pool_out(input: u64, pad: u64, kernel: u64, stride: u64) -> u64 {
    let padded = input + 2 * pad;
    if padded <= kernel {
        1
    } else {
        (padded - kernel).div_ceil(stride) + 1
    }
}

fn build_node(l: &LayerDef, class: OpClass, inputs: &[usize], built: &[OperatorNode], t: u64) -> Result<OperatorNode> {
    let mismatch = |field: &str, message: String| Error::ShapeMismatch {
        node: l.id.clone(),
        field: field.to_string(),
        message,
    };
    let missing = |field: &str| Error::Parse {
        location: format!("layer '{}' field '{field}'", l.id),
        message: "required field missing".into(),
    };
    let producers: Vec<&OperatorNode> = inputs.iter().map(|&i| &built[i]).collect();
    let (input_shape, projection, output_shape) = match class {
        OpClass::InputSource => {
            if !inputs.is_empty() {
                return Err(mismatch("inputs", "input source takes no inputs".into()));
            }
            let shape = FeatureShape {
                channels: l.channels.ok_or_else(|| missing("channels"))?,
                height: l.height.ok_or_else(|| missing("height"))?,
                width: l.width.unwrap_or(1),
            };
            (shape, Projection::IDENTITY, shape)
        }
        _ => {
            if producers.is_empty() {
                return Err(mismatch("inputs", "operator has no producer".into()));
            }
            let input = producers[0].output_shape;
            if class.is_elementwise() {
                if producers.len() < 2 {
                    return Err(mismatch("inputs", "elementwise op needs at least two inputs".into()));
                }
                if let Some(p) = producers.iter().find(|p| p.output_shape != input) {
                    return Err(mismatch(
                        "inputs",
                        format!("producer '{}' shape {:?} differs from {:?}", p.id, p.output_shape, input),
                    ));
                }
            } else if producers.len() != 1 {
                return Err(mismatch("inputs", format!("expected one input, got {}", producers.len())));
            }
            let default_kernel = match class {
                OpClass::Conv2D => None,
                OpClass::MaxPool => Some(2),
                _ => Some(1),
            };
            let (ky, kx) = match (l.kernel, default_kernel) {
                (Some(k), _) => k.yx(),
                (None, Some(k)) => (k, k),
                (None, None) => return Err(missing("kernel")),
            };
            if class.is_elementwise() && (ky, kx) != (1, 1) {
                return Err(mismatch("kernel", "elementwise ops have no kernel".into()));
            }
            if class == OpClass::Pointwise && (ky, kx) != (1, 1) {
                return Err(mismatch("kernel", "pointwise kernel must be 1".into()));
            }
            let default_stride = if class == OpClass::MaxPool { (ky, kx) } else { (1, 1) };
            let (sy, sx) = l.stride.map_or(default_stride, Pair::yx);
            if sy == 0 || sx == 0 {
                return Err(mismatch("stride", "stride must be >= 1".into()));
            }
            let (py, px) = l.padding.map_or((0, 0), Pair::yx);
            let proj = Projection { stride_y: sy, stride_x: sx, pad_y: py, pad_x: px, kernel_y: ky, kernel_x: kx };
            let (oy, ox) = if class == OpClass::MaxPool {
                (pool_out(input.height, py, ky, sy), pool_out(input.width, px, kx, sx))
            } else {
                let oy = conv_out(input.height, py, ky, sy)
                    .ok_or_else(|| mismatch("kernel", format!("kernel {ky} exceeds padded height")))?;
                let ox = conv_out(input.width, px, kx, sx)
                    .ok_or_else(|| mismatch("kernel", format!("kernel {kx} exceeds padded width")))?;
                (oy, ox)
            };
            let k = if class.has_weights() {
                l.out_channels.ok_or_else(|| missing("out_channels"))?
            } else {
                if let Some(k) = l.out_channels {
                    if k != input.channels {
                        return Err(mismatch(
                            "out_channels",
                            format!("{k} differs from input channels {}", input.channels),
                        ));
                    }
                }
                input.channels
            };
            if k == 0 {
                return Err(mismatch("out_channels", "must be >= 1".into()));
            }
            (input, proj, FeatureShape { channels: k, height: oy, width: ox })
        }
    };
    if l.stateful && !class.has_weights() {
        return Err(mismatch("stateful", format!("{} cannot hold neuron state", class.name())));
    }
    let input_spiking = !producers.is_empty() && producers.iter().all(|p| p.spiking);
    let spiking = l.spiking.unwrap_or(match class {
        OpClass::InputSource => true,
        OpClass::Conv2D | OpClass::Pointwise => l.stateful,
        _ => input_spiking,
    });
    let lif = if l.stateful || (spiking && class.has_weights()) {
        Some(l.lif.unwrap_or_default())
    } else {
        l.lif
    };
    Ok(OperatorNode {
        id: l.id.clone(),
        op_class: class,
        dims: operator_dims(class, t, input_shape, output_shape, &projection),
        operands: operator_operands(class, l.stateful, input_spiking, spiking),
        projection,
        stateful: l.stateful,
        lif,
        block_id: l.block,
        inputs: inputs.to_vec(),
        spiking,
        input_shape,
        output_shape,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::workload::Axis;

    const TWO_LAYER: &str = r#"
timesteps = 4

[[layers]]
id = "in"
class = "input"
channels = 2
height = 8
width = 8

[[layers]]
id = "conv"
class = "conv2d"
inputs = ["in"]
out_channels = 4
kernel = 3
padding = 1
stateful = true
lif = { alpha = 0.5, v_thr = 1.0, i_reset = 1.0 }

[[layers]]
id = "pool"
class = "maxpool"
inputs = ["conv"]
block = 1
"#;

    #[test]
    fn parses_two_layer_document() {
        let g = parse_workload(TWO_LAYER).unwrap();
        assert_eq!(g.nodes.len(), 3);
        assert_eq!(g.edges, vec![(0, 1), (1, 2)]);
        let conv = &g.nodes[1];
        assert!(conv.stateful);
        assert_eq!(conv.output_shape, FeatureShape { channels: 4, height: 8, width: 8 });
        assert_eq!(conv.dim(Axis::C), 2);
        assert_eq!(g.nodes[2].output_shape.height, 4);
        assert!(g.nodes[2].spiking);
        assert!(!g.nodes[2].stateful);
    }

    #[test]
    fn cycle_is_reported_with_node() {
        let doc = r#"
timesteps = 1
[[layers]]
id = "A"
class = "conv2d"
inputs = ["B"]
out_channels = 2
kernel = 1
[[layers]]
id = "B"
class = "conv2d"
inputs = ["A"]
out_channels = 2
kernel = 1
"#;
        assert_eq!(parse_workload(doc), Err(Error::CycleDetected { node: "A".into() }));
    }

    #[test]
    fn duplicate_and_unknown_class() {
        let dup = TWO_LAYER.replace("id = \"pool\"", "id = \"conv\"");
        assert_eq!(parse_workload(&dup), Err(Error::DuplicateNode { node: "conv".into() }));
        let bad = TWO_LAYER.replace("class = \"maxpool\"", "class = \"softmax\"");
        assert!(matches!(parse_workload(&bad), Err(Error::UnknownOpClass { node, .. }) if node == "pool"));
    }

    #[test]
    fn elementwise_shape_mismatch() {
        let doc = r#"
timesteps = 1
[[layers]]
id = "in"
class = "input"
channels = 2
height = 8
[[layers]]
id = "a"
class = "conv2d"
inputs = ["in"]
out_channels = 2
kernel = [3, 1]
padding = [1, 0]
[[layers]]
id = "b"
class = "conv2d"
inputs = ["in"]
out_channels = 4
kernel = [3, 1]
padding = [1, 0]
[[layers]]
id = "sum"
class = "add"
inputs = ["a", "b"]
"#;
        let err = parse_workload(doc).unwrap_err();
        assert!(matches!(err, Error::ShapeMismatch { ref node, .. } if node == "sum"), "{err}");
    }

    #[test]
    fn unknown_key_names_field() {
        let doc = TWO_LAYER.replace("kernel = 3", "kernal = 3");
        let err = parse_workload(&doc).unwrap_err().to_string();
        assert!(err.contains("kernal"), "{err}");
    }

    #[test]
    fn json_documents_are_accepted() {
        let doc = r#"{"timesteps": 2, "layers": [
            {"id": "in", "class": "input", "channels": 1, "height": 4},
            {"id": "c", "class": "conv2d", "inputs": ["in"], "out_channels": 2, "kernel": [3,1], "padding": [1,0], "stateful": true}
        ]}"#;
        let g = parse_workload(doc).unwrap();
        assert_eq!(g.nodes[1].state_elements(), 8);
    }
}
