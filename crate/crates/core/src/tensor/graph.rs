use std::fmt;

use serde::{Deserialize, Serialize};

use super::EngineError;

pub type NodeId = usize;

/// Parameters of one layer: tensors `"{layer}.w"` / `"{layer}.b"` (or the
/// norm tensors) under `share_key`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamRef {
    pub share_key: String,
    pub layer: String,
}

impl ParamRef {
    pub fn new(share_key: impl Into<String>, layer: impl Into<String>) -> Self {
        ParamRef { share_key: share_key.into(), layer: layer.into() }
    }

    pub fn tensor(&self, suffix: &str) -> String {
        format!("{}.{suffix}", self.layer)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Op {
    /// The graph input.
    Input,
    /// `y = W x + b`, `W: [out, in]`.
    Dense { param: ParamRef, inputs: usize, outputs: usize },
    /// Same-padded square convolution, `W: [out_ch, in_ch, k, k]`. Stride 2
    /// is the downsampling variant.
    Conv2d { param: ParamRef, in_ch: usize, out_ch: usize, kernel: usize, stride: usize },
    Relu,
    /// Elementwise sum of all inputs.
    Add,
    Scale(f64),
    /// Per-channel standardization with learned affine and running statistics.
    ChannelNorm { param: ParamRef, channels: usize },
    GlobalAvgPool,
    /// Multiplies a residual path by its gate factor. Training passes take the
    /// factor from the supplied gate set; evaluation uses `eval_scale`.
    Gate { module: usize, slot: usize, eval_scale: f64 },
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Op::Input => write!(f, "input"),
            Op::Dense { param, inputs, outputs } => {
                write!(f, "dense {}/{} {inputs}->{outputs}", param.share_key, param.layer)
            }
            Op::Conv2d { param, in_ch, out_ch, kernel, stride } => write!(
                f,
                "conv{kernel}x{kernel}/s{stride} {}/{} {in_ch}->{out_ch}",
                param.share_key, param.layer
            ),
            Op::Relu => write!(f, "relu"),
            Op::Add => write!(f, "add"),
            Op::Scale(b) => write!(f, "scale {b}"),
            Op::ChannelNorm { param, .. } => write!(f, "norm {}/{}", param.share_key, param.layer),
            Op::GlobalAvgPool => write!(f, "gap"),
            Op::Gate { module, slot, .. } => write!(f, "gate m{module}.p{slot}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub op: Op,
    pub inputs: Vec<NodeId>,
}

/// Append-only DAG: nodes only reference earlier nodes, so index order is a
/// topological order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Graph {
    nodes: Vec<Node>,
    /// Per-sample input shape (batch extent excluded).
    input_shape: Vec<usize>,
    output: NodeId,
}

impl Graph {
    pub fn new(input_shape: &[usize]) -> Self {
        Graph {
            nodes: vec![Node { op: Op::Input, inputs: vec![] }],
            input_shape: input_shape.to_vec(),
            output: 0,
        }
    }

    pub const INPUT: NodeId = 0;

    pub fn push(&mut self, op: Op, inputs: &[NodeId]) -> NodeId {
        let id = self.nodes.len();
        assert!(inputs.iter().all(|&i| i < id), "graph inputs must precede the node");
        self.nodes.push(Node { op, inputs: inputs.to_vec() });
        self.output = id;
        id
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = node;
    }

    pub fn output(&self) -> NodeId {
        self.output
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [Node] {
        &mut self.nodes
    }

    pub fn node(&self, id: NodeId) -> &Node {
        &self.nodes[id]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.len() <= 1
    }

    pub fn input_shape(&self) -> &[usize] {
        &self.input_shape
    }

    /// Same nodes fed with a different per-sample input shape.
    pub fn with_input_shape(&self, input_shape: &[usize]) -> Graph {
        Graph { input_shape: input_shape.to_vec(), ..self.clone() }
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        if self.nodes.first().map(|n| &n.op) != Some(&Op::Input) {
            return Err(EngineError::Graph("node 0 must be the input".into()));
        }
        for (id, node) in self.nodes.iter().enumerate().skip(1) {
            if node.inputs.iter().any(|&i| i >= id) {
                return Err(EngineError::Graph(format!("node {id} references a later node")));
            }
            let arity_ok = match node.op {
                Op::Input => false,
                Op::Add => !node.inputs.is_empty(),
                _ => node.inputs.len() == 1,
            };
            if !arity_ok {
                return Err(EngineError::Graph(format!("node {id} ({}) has wrong arity", node.op)));
            }
        }
        if self.output >= self.nodes.len() {
            return Err(EngineError::Graph("output out of range".into()));
        }
        Ok(())
    }

    /// Output shape of every node for a given batch size.
    pub fn infer_shapes(&self, batch: usize) -> Result<Vec<Vec<usize>>, EngineError> {
        let mut shapes: Vec<Vec<usize>> = Vec::with_capacity(self.nodes.len());
        for (id, node) in self.nodes.iter().enumerate() {
            let mismatch = |expected: Vec<usize>, got: &[usize]| EngineError::NodeShape {
                node: id,
                op: node.op.to_string(),
                expected,
                got: got.to_vec(),
            };
            let shape = match &node.op {
                Op::Input => {
                    let mut s = vec![batch];
                    s.extend_from_slice(&self.input_shape);
                    s
                }
                Op::Dense { inputs, outputs, .. } => {
                    let x = &shapes[node.inputs[0]];
                    if x.len() != 2 || x[1] != *inputs {
                        return Err(mismatch(vec![batch, *inputs], x));
                    }
                    vec![x[0], *outputs]
                }
                Op::Conv2d { in_ch, out_ch, kernel, stride, .. } => {
                    let x = &shapes[node.inputs[0]];
                    if x.len() != 4 || x[1] != *in_ch {
                        return Err(mismatch(vec![batch, *in_ch, 0, 0], x));
                    }
                    let pad = kernel / 2;
                    let out = |n: usize| (n + 2 * pad - kernel) / stride + 1;
                    vec![x[0], *out_ch, out(x[2]), out(x[3])]
                }
                Op::ChannelNorm { channels, .. } => {
                    let x = &shapes[node.inputs[0]];
                    if x.len() < 2 || x[1] != *channels {
                        return Err(mismatch(vec![batch, *channels], x));
                    }
                    x.clone()
                }
                Op::GlobalAvgPool => {
                    let x = &shapes[node.inputs[0]];
                    if x.len() != 4 {
                        return Err(mismatch(vec![batch, 0, 0, 0], x));
                    }
                    vec![x[0], x[1]]
                }
                Op::Add => {
                    let first = shapes[node.inputs[0]].clone();
                    for &i in &node.inputs[1..] {
                        if shapes[i] != first {
                            return Err(mismatch(first, &shapes[i]));
                        }
                    }
                    first
                }
                Op::Relu | Op::Scale(_) | Op::Gate { .. } => shapes[node.inputs[0]].clone(),
            };
            shapes.push(shape);
        }
        Ok(shapes)
    }
}
