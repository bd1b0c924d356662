use std::collections::BTreeMap;

use crate::error::{Error, Result};

pub type NodeId = usize;

/// Operation recorded in an [`ExprGraph`] node.
///
/// Shapes are not fixed at construction; they are checked when the graph is
/// evaluated against concrete bindings.
#[derive(Debug, Clone, PartialEq)]
pub enum Op {
    /// Named leaf, bound at evaluation time.
    Leaf(String),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    AddScalar(NodeId, f64),
    MulScalar(NodeId, f64),
    /// `x[n, c, ...] + bias[c]`.
    BiasAdd(NodeId, NodeId),
    /// `[m, k] x [k, n]`.
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    /// Input `[N, Cin, H, W]`, weight `[Cout, Cin, kh, kw]`.
    Conv2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
        pad: usize,
    },
    /// Input `[N, Cin, H, W]`, weight `[Cin, Cout, kh, kw]`; output side
    /// `(H - 1) * stride - 2 * pad + kh`.
    ConvTranspose2d {
        input: NodeId,
        weight: NodeId,
        stride: usize,
        pad: usize,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    Log(NodeId),
    Square(NodeId),
    /// Row-wise softmax over the last axis of a rank-2 tensor.
    Softmax(NodeId),
    LogSoftmax(NodeId),
    /// Sum of all elements, rank-0 result.
    Sum(NodeId),
    /// Mean of all elements, rank-0 result.
    Mean(NodeId),
    /// Normalizes over every axis except axis 1.
    BatchNorm {
        input: NodeId,
        gamma: NodeId,
        beta: NodeId,
        running_mean: NodeId,
        running_var: NodeId,
        eps: f64,
    },
    /// Nearest-neighbour downsampling: keeps pixel `(i * f, j * f)`.
    Downsample { input: NodeId, factor: usize },
    /// Nearest-neighbour upsampling by pixel replication.
    Upsample { input: NodeId, factor: usize },
    /// Reshape; at most one `-1` entry is inferred.
    Reshape { input: NodeId, shape: Vec<isize> },
    /// `[N, C, H, W] -> [N, C]`.
    GlobalAvgPool(NodeId),
    /// `[N, 1] -> [N, cols]` by column replication.
    ExpandCols { input: NodeId, cols: usize },
    /// Squared Euclidean distances between rows: `[N, d] x [K, d] -> [N, K]`.
    PairwiseSqDist(NodeId, NodeId),
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::AddScalar(..) => "add_scalar",
            Op::MulScalar(..) => "mul_scalar",
            Op::BiasAdd(..) => "bias_add",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Conv2d { .. } => "conv2d",
            Op::ConvTranspose2d { .. } => "conv_transpose2d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Log(_) => "log",
            Op::Square(_) => "square",
            Op::Softmax(_) => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::BatchNorm { .. } => "batch_norm",
            Op::Downsample { .. } => "downsample",
            Op::Upsample { .. } => "upsample",
            Op::Reshape { .. } => "reshape",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::ExpandCols { .. } => "expand_cols",
            Op::PairwiseSqDist(..) => "pairwise_sq_dist",
        }
    }

    pub fn inputs(&self) -> Vec<NodeId> {
        match self {
            Op::Leaf(_) => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::BiasAdd(a, b)
            | Op::MatMul(a, b)
            | Op::PairwiseSqDist(a, b) => vec![*a, *b],
            Op::AddScalar(a, _)
            | Op::MulScalar(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Sigmoid(a)
            | Op::Log(a)
            | Op::Square(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::GlobalAvgPool(a) => vec![*a],
            Op::Conv2d { input, weight, .. } | Op::ConvTranspose2d { input, weight, .. } => {
                vec![*input, *weight]
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                running_mean,
                running_var,
                ..
            } => vec![*input, *gamma, *beta, *running_mean, *running_var],
            Op::Downsample { input, .. }
            | Op::Upsample { input, .. }
            | Op::Reshape { input, .. }
            | Op::ExpandCols { input, .. } => vec![*input],
        }
    }
}

/// A differentiable computation record.
///
/// Nodes are appended in topological order: every node's inputs have smaller
/// ids, so the graph is acyclic by construction.
#[derive(Debug, Clone, Default)]
pub struct ExprGraph {
    nodes: Vec<Op>,
    leaves: BTreeMap<String, NodeId>,
    trainable: Vec<String>,
    outputs: BTreeMap<String, NodeId>,
}

impl ExprGraph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn op(&self, id: NodeId) -> &Op {
        &self.nodes[id]
    }

    pub fn ops(&self) -> &[Op] {
        &self.nodes
    }

    /// Leaf node by name.
    pub fn leaf(&self, name: &str) -> Option<NodeId> {
        self.leaves.get(name).copied()
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    /// Names of leaves marked trainable, in creation order.
    pub fn trainable(&self) -> &[String] {
        &self.trainable
    }

    pub fn set_output(&mut self, name: &str, id: NodeId) {
        self.outputs.insert(name.to_string(), id);
    }

    pub fn output(&self, name: &str) -> Option<NodeId> {
        self.outputs.get(name).copied()
    }

    pub fn outputs(&self) -> &BTreeMap<String, NodeId> {
        &self.outputs
    }

    /// Appends a node after checking that its inputs already exist.
    pub fn push(&mut self, op: Op) -> Result<NodeId> {
        let id = self.nodes.len();
        if let Some(bad) = op.inputs().into_iter().find(|&i| i >= id) {
            return Err(Error::node(
                id,
                op.name(),
                format!("input node {bad} does not precede this node"),
            ));
        }
        if let Op::Leaf(name) = &op {
            if self.leaves.contains_key(name) {
                return Err(Error::InvalidArgument(format!("duplicate leaf `{name}`")));
            }
            self.leaves.insert(name.clone(), id);
        }
        self.nodes.push(op);
        Ok(id)
    }

    fn push_ok(&mut self, op: Op) -> NodeId {
        // Builder helpers only reference ids handed out by this graph.
        self.push(op).expect("builder inputs always precede the new node")
    }

    /// Non-trainable named leaf (data, buffers).
    pub fn input(&mut self, name: &str) -> NodeId {
        self.push_ok(Op::Leaf(name.to_string()))
    }

    /// Trainable named leaf.
    pub fn param(&mut self, name: &str) -> NodeId {
        let id = self.push_ok(Op::Leaf(name.to_string()));
        self.trainable.push(name.to_string());
        id
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push_ok(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push_ok(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push_ok(Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push_ok(Op::Div(a, b))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push_ok(Op::AddScalar(a, c))
    }

    pub fn mul_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push_ok(Op::MulScalar(a, c))
    }

    pub fn bias_add(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        self.push_ok(Op::BiasAdd(x, bias))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push_ok(Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        self.push_ok(Op::Transpose(a))
    }

    pub fn conv2d(&mut self, input: NodeId, weight: NodeId, stride: usize, pad: usize) -> NodeId {
        self.push_ok(Op::Conv2d {
            input,
            weight,
            stride,
            pad,
        })
    }

    pub fn conv_transpose2d(
        &mut self,
        input: NodeId,
        weight: NodeId,
        stride: usize,
        pad: usize,
    ) -> NodeId {
        self.push_ok(Op::ConvTranspose2d {
            input,
            weight,
            stride,
            pad,
        })
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.push_ok(Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.push_ok(Op::Sigmoid(x))
    }

    pub fn log(&mut self, x: NodeId) -> NodeId {
        self.push_ok(Op::Log(x))
    }

    pub fn square(&mut self, x: NodeId) -> NodeId {
        self.push_ok(Op::Square(x))
    }

    pub fn softmax(&mut self, x: NodeId) -> NodeId {
        self.push_ok(Op::Softmax(x))
    }

    pub fn log_softmax(&mut self, x: NodeId) -> NodeId {
        self.push_ok(Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        self.push_ok(Op::Sum(x))
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        self.push_ok(Op::Mean(x))
    }

    /// Batch norm with parameters `{prefix}.gamma`, `{prefix}.beta` and
    /// buffers `{prefix}.running_mean`, `{prefix}.running_var`.
    pub fn batch_norm(&mut self, x: NodeId, prefix: &str) -> NodeId {
        let gamma = self.param(&format!("{prefix}.gamma"));
        let beta = self.param(&format!("{prefix}.beta"));
        let running_mean = self.input(&format!("{prefix}.running_mean"));
        let running_var = self.input(&format!("{prefix}.running_var"));
        self.push_ok(Op::BatchNorm {
            input: x,
            gamma,
            beta,
            running_mean,
            running_var,
            eps: BN_EPS,
        })
    }

    pub fn downsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        self.push_ok(Op::Downsample { input: x, factor })
    }

    pub fn upsample(&mut self, x: NodeId, factor: usize) -> NodeId {
        self.push_ok(Op::Upsample { input: x, factor })
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[isize]) -> NodeId {
        self.push_ok(Op::Reshape {
            input: x,
            shape: shape.to_vec(),
        })
    }

    pub fn global_avg_pool(&mut self, x: NodeId) -> NodeId {
        self.push_ok(Op::GlobalAvgPool(x))
    }

    pub fn expand_cols(&mut self, x: NodeId, cols: usize) -> NodeId {
        self.push_ok(Op::ExpandCols { input: x, cols })
    }

    pub fn pairwise_sq_dist(&mut self, z: NodeId, centers: NodeId) -> NodeId {
        self.push_ok(Op::PairwiseSqDist(z, centers))
    }

    /// Ids of all nodes `targets` depend on (including themselves).
    pub fn ancestors(&self, targets: &[NodeId]) -> Vec<bool> {
        let mut needed = vec![false; self.nodes.len()];
        for &t in targets {
            if t < needed.len() {
                needed[t] = true;
            }
        }
        for id in (0..self.nodes.len()).rev() {
            if needed[id] {
                for i in self.nodes[id].inputs() {
                    needed[i] = true;
                }
            }
        }
        needed
    }
}

/// Batch-norm epsilon.
pub const BN_EPS: f64 = 1e-5;
/// Weight of the newest batch statistic in running averages.
pub const BN_MOMENTUM: f64 = 0.1;
