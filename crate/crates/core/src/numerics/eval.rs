use std::collections::{BTreeMap, HashMap};

use super::graph::{ExprGraph, NodeId, Op};
use super::kernels::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Batch-norm behaviour for an evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Normalize with batch statistics and report them.
    Train,
    /// Normalize with the bound running statistics.
    Inference,
}

/// Name → tensor lookups for leaf nodes. Borrows, so large parameter maps are
/// never copied per batch.
pub struct Bindings<'a, T> {
    entries: HashMap<&'a str, &'a Tensor<T>>,
}

impl<T> Default for Bindings<'_, T> {
    fn default() -> Self {
        Bindings {
            entries: HashMap::new(),
        }
    }
}

impl<'a, T> Bindings<'a, T> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bind(mut self, name: &'a str, tensor: &'a Tensor<T>) -> Self {
        self.entries.insert(name, tensor);
        self
    }

    pub fn insert(&mut self, name: &'a str, tensor: &'a Tensor<T>) {
        self.entries.insert(name, tensor);
    }

    pub fn extend(mut self, map: &'a BTreeMap<String, Tensor<T>>) -> Self {
        for (k, v) in map {
            self.entries.insert(k.as_str(), v);
        }
        self
    }

    pub fn get(&self, name: &str) -> Option<&'a Tensor<T>> {
        self.entries.get(name).copied()
    }
}

/// Per-channel statistics of a batch-norm node evaluated in train mode.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Biased (population) variance.
    pub var: Vec<f64>,
    /// Elements per channel.
    pub count: usize,
}

/// Forward values of an evaluated graph.
#[derive(Debug)]
pub struct Evaluation<T: Scalar> {
    pub(crate) values: Vec<Option<Tensor<T>>>,
    pub(crate) batch_stats: BTreeMap<NodeId, BatchStats>,
    pub(crate) mode: Mode,
}

impl<T: Scalar> Evaluation<T> {
    pub fn value(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.values.get(id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.values.get_mut(id).and_then(Option::take)
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Batch statistics of every batch-norm node, keyed by node id.
    pub fn batch_stats(&self) -> &BTreeMap<NodeId, BatchStats> {
        &self.batch_stats
    }

    /// All computed values keyed by node id.
    pub fn into_map(self) -> BTreeMap<NodeId, Tensor<T>> {
        self.values
            .into_iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
            .collect()
    }
}

/// Evaluates every node `targets` depend on. Leaves outside that set need not
/// be bound.
pub fn evaluate<T: Scalar>(
    graph: &ExprGraph,
    bindings: &Bindings<'_, T>,
    mode: Mode,
    targets: &[NodeId],
) -> Result<Evaluation<T>> {
    let needed = graph.ancestors(targets);
    let mut values: Vec<Option<Tensor<T>>> = vec![None; graph.len()];
    let mut batch_stats = BTreeMap::new();
    for (id, op) in graph.ops().iter().enumerate() {
        if !needed[id] {
            continue;
        }
        let out = match op {
            Op::Leaf(name) => bindings
                .get(name)
                .ok_or_else(|| Error::UnboundLeaf(name.clone()))?
                .clone(),
            _ => {
                let inputs: Vec<&Tensor<T>> = op
                    .inputs()
                    .into_iter()
                    .map(|i| values[i].as_ref().expect("inputs evaluated before use"))
                    .collect();
                let (out, stats) =
                    forward_op(op, &inputs, mode).map_err(|m| Error::node(id, op.name(), m))?;
                if let Some(stats) = stats {
                    batch_stats.insert(id, stats);
                }
                out
            }
        };
        if !out.all_finite() {
            return Err(Error::NonFinite {
                node: id,
                op: op.name(),
            });
        }
        values[id] = Some(out);
    }
    Ok(Evaluation {
        values,
        batch_stats,
        mode,
    })
}

/// Evaluates the whole graph.
pub fn evaluate_all<T: Scalar>(
    graph: &ExprGraph,
    bindings: &Bindings<'_, T>,
    mode: Mode,
) -> Result<Evaluation<T>> {
    let all: Vec<NodeId> = (0..graph.len()).collect();
    evaluate(graph, bindings, mode, &all)
}

type OpResult<T> = std::result::Result<(Tensor<T>, Option<BatchStats>), String>;

fn same_shape<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> std::result::Result<(), String> {
    if a.shape() == b.shape() {
        Ok(())
    } else {
        Err(format!("shape mismatch {:?} vs {:?}", a.shape(), b.shape()))
    }
}

fn zip_with<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("same shape")
}

fn rank_is<T: Scalar>(t: &Tensor<T>, rank: usize, what: &str) -> std::result::Result<(), String> {
    if t.rank() == rank {
        Ok(())
    } else {
        Err(format!("{what} must have rank {rank}, got shape {:?}", t.shape()))
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn conv_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> std::result::Result<ConvGeom, String> {
    rank_is(x, 4, "conv input")?;
    rank_is(w, 4, "conv weight")?;
    if x.shape()[1] != w.shape()[1] {
        return Err(format!(
            "input channels {} do not match weight {:?}",
            x.shape()[1],
            w.shape()
        ));
    }
    let g = ConvGeom {
        channels: x.shape()[1],
        height: x.shape()[2],
        width: x.shape()[3],
        kh: w.shape()[2],
        kw: w.shape()[3],
        stride,
        pad,
    };
    if !g.valid() {
        return Err(format!("kernel {:?} does not fit input {:?}", w.shape(), x.shape()));
    }
    Ok(g)
}

/// Geometry of the adjoint convolution for a transposed convolution.
pub(crate) fn conv_t_geom<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> std::result::Result<ConvGeom, String> {
    rank_is(x, 4, "transposed conv input")?;
    rank_is(w, 4, "transposed conv weight")?;
    if x.shape()[1] != w.shape()[0] {
        return Err(format!(
            "input channels {} do not match weight {:?}",
            x.shape()[1],
            w.shape()
        ));
    }
    if stride == 0 {
        return Err("stride must be positive".into());
    }
    let (h, wd, kh, kw) = (x.shape()[2], x.shape()[3], w.shape()[2], w.shape()[3]);
    let ho = ((h - 1) * stride + kh)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
        .ok_or("padding too large for transposed conv")?;
    let wo = ((wd - 1) * stride + kw)
        .checked_sub(2 * pad)
        .filter(|&v| v > 0)
        .ok_or("padding too large for transposed conv")?;
    Ok(ConvGeom {
        channels: w.shape()[1],
        height: ho,
        width: wo,
        kh,
        kw,
        stride,
        pad,
    })
}

/// `(channels, elements per channel per item)` for channel-wise ops.
pub(crate) fn channel_layout<T: Scalar>(x: &Tensor<T>) -> std::result::Result<(usize, usize), String> {
    if x.rank() < 2 {
        return Err(format!("expected at least rank 2, got {:?}", x.shape()));
    }
    Ok((x.shape()[1], x.shape()[2..].iter().product()))
}

fn resolve_reshape(len: usize, shape: &[isize]) -> std::result::Result<Vec<usize>, String> {
    let known: usize = shape.iter().filter(|&&d| d >= 0).map(|&d| d as usize).product();
    let inferred = shape.iter().filter(|&&d| d < 0).count();
    if inferred > 1 {
        return Err("at most one inferred dimension".into());
    }
    let out: Vec<usize> = shape
        .iter()
        .map(|&d| {
            if d < 0 {
                if known == 0 {
                    0
                } else {
                    len / known
                }
            } else {
                d as usize
            }
        })
        .collect();
    if out.iter().product::<usize>() != len {
        return Err(format!("cannot reshape {len} elements to {shape:?}"));
    }
    Ok(out)
}

fn forward_op<T: Scalar>(op: &Op, inp: &[&Tensor<T>], mode: Mode) -> OpResult<T> {
    let out = match op {
        Op::Leaf(_) => unreachable!("leaves are bound, not computed"),
        Op::Add(..) => {
            same_shape(inp[0], inp[1])?;
            zip_with(inp[0], inp[1], |a, b| a + b)
        }
        Op::Sub(..) => {
            same_shape(inp[0], inp[1])?;
            zip_with(inp[0], inp[1], |a, b| a - b)
        }
        Op::Mul(..) => {
            same_shape(inp[0], inp[1])?;
            zip_with(inp[0], inp[1], |a, b| a * b)
        }
        Op::Div(..) => {
            same_shape(inp[0], inp[1])?;
            zip_with(inp[0], inp[1], |a, b| a / b)
        }
        Op::AddScalar(_, c) => {
            let c = T::of(*c);
            inp[0].map(|v| v + c)
        }
        Op::MulScalar(_, c) => {
            let c = T::of(*c);
            inp[0].map(|v| v * c)
        }
        Op::BiasAdd(..) => {
            let (x, b) = (inp[0], inp[1]);
            let (c, inner) = channel_layout(x)?;
            if b.shape() != [c] {
                return Err(format!("bias {:?} does not match channels of {:?}", b.shape(), x.shape()));
            }
            let mut out = x.clone();
            for (chunk_idx, chunk) in out.data_mut().chunks_mut(inner.max(1)).enumerate() {
                let bv = b.data()[chunk_idx % c];
                chunk.iter_mut().for_each(|v| *v += bv);
            }
            out
        }
        Op::MatMul(..) => {
            let (a, b) = (inp[0], inp[1]);
            rank_is(a, 2, "matmul lhs")?;
            rank_is(b, 2, "matmul rhs")?;
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if b.shape()[0] != k {
                return Err(format!("matmul {:?} x {:?}", a.shape(), b.shape()));
            }
            let mut c = vec![T::zero(); m * n];
            kernels::gemm(m, k, n, a.data(), false, b.data(), false, T::zero(), &mut c);
            Tensor::new(vec![m, n], c).expect("shape")
        }
        Op::Transpose(_) => {
            let a = inp[0];
            rank_is(a, 2, "transpose input")?;
            transpose2(a)
        }
        Op::Conv2d { stride, pad, .. } => {
            let (x, w) = (inp[0], inp[1]);
            let g = conv_geom(x, w, *stride, *pad)?;
            let (n, co) = (x.shape()[0], w.shape()[0]);
            let y = kernels::conv2d(x.data(), n, &g, w.data(), co);
            Tensor::new(vec![n, co, g.out_height(), g.out_width()], y).expect("shape")
        }
        Op::ConvTranspose2d { stride, pad, .. } => {
            let (x, w) = (inp[0], inp[1]);
            let g = conv_t_geom(x, w, *stride, *pad)?;
            if g.out_height() != x.shape()[2] || g.out_width() != x.shape()[3] {
                return Err(format!(
                    "transposed conv geometry does not round-trip for input {:?}",
                    x.shape()
                ));
            }
            let n = x.shape()[0];
            let y = kernels::conv_transpose2d(x.data(), n, x.shape()[1], &g, w.data());
            Tensor::new(vec![n, g.channels, g.height, g.width], y).expect("shape")
        }
        Op::Relu(_) => inp[0].map(|v| if v > T::zero() { v } else { T::zero() }),
        Op::Sigmoid(_) => inp[0].map(sigmoid),
        Op::Log(_) => {
            if inp[0].data().iter().any(|&v| v <= T::zero()) {
                return Err("log of a non-positive value".into());
            }
            inp[0].map(|v| v.ln())
        }
        Op::Square(_) => inp[0].map(|v| v * v),
        Op::Softmax(_) => {
            rank_is(inp[0], 2, "softmax input")?;
            row_softmax(inp[0], false)
        }
        Op::LogSoftmax(_) => {
            rank_is(inp[0], 2, "log_softmax input")?;
            row_softmax(inp[0], true)
        }
        Op::Sum(_) => Tensor::scalar(T::of(sum_f64(inp[0].data()))),
        Op::Mean(_) => {
            let n = inp[0].len();
            if n == 0 {
                return Err("mean of an empty tensor".into());
            }
            Tensor::scalar(T::of(sum_f64(inp[0].data()) / n as f64))
        }
        Op::BatchNorm { eps, .. } => return batch_norm_forward(inp, *eps, mode),
        Op::Downsample { factor, .. } => {
            let x = inp[0];
            rank_is(x, 4, "downsample input")?;
            let f = *factor;
            let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
            if f == 0 || h % f != 0 || w % f != 0 {
                return Err(format!("factor {f} does not divide {h}x{w}"));
            }
            let (ho, wo) = (h / f, w / f);
            let mut out = Vec::with_capacity(n * c * ho * wo);
            for plane in x.data().chunks(h * w) {
                for i in 0..ho {
                    for j in 0..wo {
                        out.push(plane[i * f * w + j * f]);
                    }
                }
            }
            Tensor::new(vec![n, c, ho, wo], out).expect("shape")
        }
        Op::Upsample { factor, .. } => {
            let x = inp[0];
            rank_is(x, 4, "upsample input")?;
            let f = *factor;
            if f == 0 {
                return Err("upsample factor must be positive".into());
            }
            let [n, c, h, w] = [x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]];
            let (ho, wo) = (h * f, w * f);
            let mut out = Vec::with_capacity(n * c * ho * wo);
            for plane in x.data().chunks(h * w) {
                for i in 0..ho {
                    for j in 0..wo {
                        out.push(plane[(i / f) * w + j / f]);
                    }
                }
            }
            Tensor::new(vec![n, c, ho, wo], out).expect("shape")
        }
        Op::Reshape { shape, .. } => {
            let dims = resolve_reshape(inp[0].len(), shape)?;
            inp[0].clone().reshape(&dims).map_err(|e| e.to_string())?
        }
        Op::GlobalAvgPool(_) => {
            let x = inp[0];
            rank_is(x, 4, "global_avg_pool input")?;
            let (n, c) = (x.shape()[0], x.shape()[1]);
            let hw = x.shape()[2] * x.shape()[3];
            let out = x
                .data()
                .chunks(hw)
                .map(|p| T::of(sum_f64(p) / hw as f64))
                .collect();
            Tensor::new(vec![n, c], out).expect("shape")
        }
        Op::ExpandCols { cols, .. } => {
            let x = inp[0];
            if x.rank() != 2 || x.shape()[1] != 1 {
                return Err(format!("expand_cols needs [N, 1], got {:?}", x.shape()));
            }
            let n = x.shape()[0];
            let out = x.data().iter().flat_map(|&v| std::iter::repeat_n(v, *cols)).collect();
            Tensor::new(vec![n, *cols], out).expect("shape")
        }
        Op::PairwiseSqDist(..) => {
            let (z, c) = (inp[0], inp[1]);
            rank_is(z, 2, "pairwise_sq_dist lhs")?;
            rank_is(c, 2, "pairwise_sq_dist rhs")?;
            let (n, d, k) = (z.shape()[0], z.shape()[1], c.shape()[0]);
            if c.shape()[1] != d {
                return Err(format!("dimension mismatch {:?} vs {:?}", z.shape(), c.shape()));
            }
            let mut out = Vec::with_capacity(n * k);
            for zi in z.data().chunks(d) {
                for ci in c.data().chunks(d) {
                    let mut acc = T::zero();
                    for (&a, &b) in zi.iter().zip(ci) {
                        let diff = a - b;
                        acc += diff * diff;
                    }
                    out.push(acc);
                }
            }
            Tensor::new(vec![n, k], out).expect("shape")
        }
    };
    Ok((out, None))
}

pub(crate) fn sum_f64<T: Scalar>(data: &[T]) -> f64 {
    data.iter().map(|v| v.to_f64()).sum()
}

pub(crate) fn transpose2<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let mut out = vec![T::zero(); r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data()[i * c + j];
        }
    }
    Tensor::new(vec![c, r], out).expect("shape")
}

pub(crate) fn row_softmax<T: Scalar>(x: &Tensor<T>, log: bool) -> Tensor<T> {
    let cols = x.shape()[1];
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(cols.max(1)) {
        let max = row.iter().copied().fold(row[0], |a, b| a.max(b));
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let log_sum = sum.ln();
        for v in row.iter_mut() {
            *v = if log {
                *v - max - log_sum
            } else {
                (*v - max).exp() / sum
            };
        }
    }
    out
}

fn batch_norm_forward<T: Scalar>(inp: &[&Tensor<T>], eps: f64, mode: Mode) -> OpResult<T> {
    let (x, gamma, beta, rmean, rvar) = (inp[0], inp[1], inp[2], inp[3], inp[4]);
    let (c, inner) = channel_layout(x)?;
    for (t, what) in [(gamma, "gamma"), (beta, "beta"), (rmean, "running_mean"), (rvar, "running_var")] {
        if t.shape() != [c] {
            return Err(format!("{what} shape {:?} does not match {c} channels", t.shape()));
        }
    }
    let n = x.shape()[0];
    let count = n * inner;
    let (mean, var) = match mode {
        Mode::Train => {
            if count < 2 {
                return Err("train-mode batch norm needs more than one value per channel".into());
            }
            let mut mean = vec![0.0f64; c];
            let mut var = vec![0.0f64; c];
            for (i, chunk) in x.data().chunks(inner).enumerate() {
                mean[i % c] += sum_f64(chunk);
            }
            mean.iter_mut().for_each(|m| *m /= count as f64);
            for (i, chunk) in x.data().chunks(inner).enumerate() {
                let m = mean[i % c];
                var[i % c] += chunk.iter().map(|v| (v.to_f64() - m).powi(2)).sum::<f64>();
            }
            var.iter_mut().for_each(|v| *v /= count as f64);
            (mean, var)
        }
        Mode::Inference => (rmean.to_f64_vec(), rvar.to_f64_vec()),
    };
    let mut out = x.clone();
    for (i, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
        let ch = i % c;
        let scale = gamma.data()[ch].to_f64() / (var[ch] + eps).sqrt();
        let shift = beta.data()[ch].to_f64() - mean[ch] * scale;
        let (scale, shift) = (T::of(scale), T::of(shift));
        chunk.iter_mut().for_each(|v| *v = *v * scale + shift);
    }
    let stats = (mode == Mode::Train).then_some(BatchStats { mean, var, count });
    Ok((out, stats))
}
