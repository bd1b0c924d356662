//! Reverse-mode differentiation over an evaluated [`ExprGraph`].

use std::collections::{BTreeMap, HashSet};

use super::eval::{
    channel_layout, conv_geom, conv_t_geom, evaluate, row_softmax, transpose2, Bindings,
    Evaluation, Mode,
};
use super::graph::{ExprGraph, NodeId, Op};
use super::kernels;
use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Vector-Jacobian product: propagates `seed` (shaped like `output`) back to
/// the named leaves. Leaves that do not influence `output` get zero tensors.
pub fn vjp<T: Scalar>(
    graph: &ExprGraph,
    eval: &Evaluation<T>,
    output: NodeId,
    seed: Tensor<T>,
    wrt: &[&str],
) -> Result<BTreeMap<String, Tensor<T>>> {
    let out_val = eval
        .value(output)
        .ok_or_else(|| Error::InvalidArgument(format!("node {output} was not evaluated")))?;
    if seed.shape() != out_val.shape() {
        return Err(Error::Shape(format!(
            "seed shape {:?} does not match output {:?}",
            seed.shape(),
            out_val.shape()
        )));
    }
    let mut leaf_ids = Vec::with_capacity(wrt.len());
    for &name in wrt {
        let id = graph
            .leaf(name)
            .ok_or_else(|| Error::UnknownLeaf(name.to_string()))?;
        leaf_ids.push(id);
    }
    let targets: HashSet<NodeId> = leaf_ids.iter().copied().collect();

    // A node needs a gradient iff it is an ancestor of `output` and depends on
    // one of the requested leaves.
    let on_path = graph.ancestors(&[output]);
    let mut requires = vec![false; graph.len()];
    for (id, op) in graph.ops().iter().enumerate().take(output + 1) {
        requires[id] = on_path[id]
            && match op {
                Op::Leaf(_) => targets.contains(&id),
                _ => op.inputs().iter().any(|&i| requires[i]),
            };
    }

    let mut grads: Vec<Option<Tensor<T>>> = vec![None; graph.len()];
    grads[output] = Some(seed);
    for id in (0..=output).rev() {
        if !requires[id] {
            continue;
        }
        let op = graph.op(id);
        if matches!(op, Op::Leaf(_)) {
            continue;
        }
        let Some(gy) = grads[id].take() else {
            continue;
        };
        let inputs = op.inputs();
        let vals: Vec<&Tensor<T>> = inputs
            .iter()
            .map(|&i| eval.value(i).expect("forward value present"))
            .collect();
        let y = eval.value(id).expect("forward value present");
        let need: Vec<bool> = inputs.iter().map(|&i| requires[i]).collect();
        let input_grads = backward_op(op, id, &vals, y, &gy, &need, eval)
            .map_err(|m| Error::node(id, op.name(), m))?;
        for ((&inp, g), needed) in inputs.iter().zip(input_grads).zip(need) {
            let Some(g) = g else { continue };
            if !needed {
                continue;
            }
            match grads[inp].as_mut() {
                Some(acc) => acc
                    .data_mut()
                    .iter_mut()
                    .zip(g.data())
                    .for_each(|(a, &b)| *a += b),
                None => grads[inp] = Some(g),
            }
        }
    }

    let mut out = BTreeMap::new();
    for (&name, &id) in wrt.iter().zip(&leaf_ids) {
        let g = match grads[id].take() {
            Some(g) => g,
            None => {
                let shape = eval
                    .value(id)
                    .map(|v| v.shape().to_vec())
                    .ok_or_else(|| Error::UnboundLeaf(name.to_string()))?;
                Tensor::zeros(&shape)
            }
        };
        out.insert(name.to_string(), g);
    }
    Ok(out)
}

/// Gradient of a scalar node with respect to named leaves.
///
/// Leaves off every path to `output` must still be bound (their gradient is a
/// zero tensor of their shape).
pub fn gradient<T: Scalar>(
    graph: &ExprGraph,
    bindings: &Bindings<'_, T>,
    mode: Mode,
    output: NodeId,
    wrt: &[&str],
) -> Result<BTreeMap<String, Tensor<T>>> {
    value_and_gradient(graph, bindings, mode, output, wrt).map(|(_, g)| g)
}

/// Scalar value and gradient, plus the evaluation (for batch-norm statistics).
pub fn value_and_gradient<T: Scalar>(
    graph: &ExprGraph,
    bindings: &Bindings<'_, T>,
    mode: Mode,
    output: NodeId,
    wrt: &[&str],
) -> Result<(T, BTreeMap<String, Tensor<T>>)> {
    let (v, g, _) = forward_backward(graph, bindings, mode, output, wrt)?;
    Ok((v, g))
}

pub fn forward_backward<T: Scalar>(
    graph: &ExprGraph,
    bindings: &Bindings<'_, T>,
    mode: Mode,
    output: NodeId,
    wrt: &[&str],
) -> Result<(T, BTreeMap<String, Tensor<T>>, Evaluation<T>)> {
    for &name in wrt {
        if graph.leaf(name).is_none() {
            return Err(Error::UnknownLeaf(name.to_string()));
        }
    }
    let mut targets = vec![output];
    targets.extend(wrt.iter().filter_map(|n| graph.leaf(n)));
    let eval = evaluate(graph, bindings, mode, &targets)?;
    let out = eval.value(output).expect("evaluated");
    if out.len() != 1 {
        return Err(Error::NonScalarOutput {
            node: output,
            shape: out.shape().to_vec(),
        });
    }
    let value = out.data()[0];
    let seed = Tensor::full(out.shape(), T::one());
    let grads = vjp(graph, &eval, output, seed, wrt)?;
    Ok((value, grads, eval))
}

type Grads<T> = Vec<Option<Tensor<T>>>;

fn like<T: Scalar>(t: &Tensor<T>, data: Vec<T>) -> Tensor<T> {
    Tensor::new(t.shape().to_vec(), data).expect("same shape")
}

fn map2<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    like(a, a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn backward_op<T: Scalar>(
    op: &Op,
    id: NodeId,
    x: &[&Tensor<T>],
    y: &Tensor<T>,
    gy: &Tensor<T>,
    need: &[bool],
    eval: &Evaluation<T>,
) -> std::result::Result<Grads<T>, String> {
    let g = match op {
        Op::Leaf(_) => vec![],
        Op::Add(..) => vec![Some(gy.clone()), Some(gy.clone())],
        Op::Sub(..) => vec![Some(gy.clone()), Some(gy.map(|v| -v))],
        Op::Mul(..) => vec![
            need[0].then(|| map2(gy, x[1], |g, b| g * b)),
            need[1].then(|| map2(gy, x[0], |g, a| g * a)),
        ],
        Op::Div(..) => vec![
            need[0].then(|| map2(gy, x[1], |g, b| g / b)),
            need[1].then(|| {
                let d = gy
                    .data()
                    .iter()
                    .zip(x[0].data())
                    .zip(x[1].data())
                    .map(|((&g, &a), &b)| -g * a / (b * b))
                    .collect();
                like(x[1], d)
            }),
        ],
        Op::AddScalar(..) => vec![Some(gy.clone())],
        Op::MulScalar(_, c) => {
            let c = T::of(*c);
            vec![Some(gy.map(|v| v * c))]
        }
        Op::BiasAdd(..) => {
            let (c, inner) = channel_layout(x[0])?;
            let mut gb = vec![0.0f64; c];
            for (i, chunk) in gy.data().chunks(inner.max(1)).enumerate() {
                gb[i % c] += chunk.iter().map(|v| v.to_f64()).sum::<f64>();
            }
            vec![
                Some(gy.clone()),
                need[1].then(|| like(x[1], gb.into_iter().map(T::of).collect())),
            ]
        }
        Op::MatMul(..) => {
            let (a, b) = (x[0], x[1]);
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = need[0].then(|| {
                let mut d = vec![T::zero(); m * k];
                kernels::gemm(m, n, k, gy.data(), false, b.data(), true, T::zero(), &mut d);
                like(a, d)
            });
            let gb = need[1].then(|| {
                let mut d = vec![T::zero(); k * n];
                kernels::gemm(k, m, n, a.data(), true, gy.data(), false, T::zero(), &mut d);
                like(b, d)
            });
            vec![ga, gb]
        }
        Op::Transpose(_) => vec![Some(transpose2(gy))],
        Op::Conv2d { stride, pad, .. } => {
            let g = conv_geom(x[0], x[1], *stride, *pad)?;
            let (n, co) = (x[0].shape()[0], x[1].shape()[0]);
            let (dx, dw) = kernels::conv2d_backward(
                x[0].data(),
                n,
                &g,
                x[1].data(),
                co,
                gy.data(),
                need[0],
                need[1],
            );
            vec![dx.map(|d| like(x[0], d)), dw.map(|d| like(x[1], d))]
        }
        Op::ConvTranspose2d { stride, pad, .. } => {
            let g = conv_t_geom(x[0], x[1], *stride, *pad)?;
            let (n, ci) = (x[0].shape()[0], x[0].shape()[1]);
            let (dx, dw) = kernels::conv_transpose2d_backward(
                x[0].data(),
                n,
                ci,
                &g,
                x[1].data(),
                gy.data(),
                need[0],
                need[1],
            );
            vec![dx.map(|d| like(x[0], d)), dw.map(|d| like(x[1], d))]
        }
        Op::Relu(_) => vec![Some(map2(gy, x[0], |g, v| if v > T::zero() { g } else { T::zero() }))],
        Op::Sigmoid(_) => vec![Some(map2(gy, y, |g, s| g * s * (T::one() - s)))],
        Op::Log(_) => vec![Some(map2(gy, x[0], |g, v| g / v))],
        Op::Square(_) => vec![Some(map2(gy, x[0], |g, v| T::of(2.0) * g * v))],
        Op::Softmax(_) => {
            let cols = y.shape()[1];
            let mut d = Vec::with_capacity(y.len());
            for (yr, gr) in y.data().chunks(cols).zip(gy.data().chunks(cols)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                d.extend(yr.iter().zip(gr).map(|(&s, &g)| s * (g - dot)));
            }
            vec![Some(like(x[0], d))]
        }
        Op::LogSoftmax(_) => {
            let cols = y.shape()[1];
            let p = row_softmax(x[0], false);
            let mut d = Vec::with_capacity(y.len());
            for (pr, gr) in p.data().chunks(cols).zip(gy.data().chunks(cols)) {
                let total: T = gr.iter().copied().sum();
                d.extend(pr.iter().zip(gr).map(|(&s, &g)| g - s * total));
            }
            vec![Some(like(x[0], d))]
        }
        Op::Sum(_) => vec![Some(Tensor::full(x[0].shape(), gy.data()[0]))],
        Op::Mean(_) => {
            let v = gy.data()[0] / T::of(x[0].len() as f64);
            vec![Some(Tensor::full(x[0].shape(), v))]
        }
        Op::BatchNorm { eps, .. } => return batch_norm_backward(id, x, gy, *eps, need, eval),
        Op::Downsample { factor, .. } => {
            let f = *factor;
            let (h, w) = (x[0].shape()[2], x[0].shape()[3]);
            let (ho, wo) = (h / f, w / f);
            let mut d = vec![T::zero(); x[0].len()];
            for (plane, gp) in d.chunks_mut(h * w).zip(gy.data().chunks(ho * wo)) {
                for i in 0..ho {
                    for j in 0..wo {
                        plane[i * f * w + j * f] = gp[i * wo + j];
                    }
                }
            }
            vec![Some(like(x[0], d))]
        }
        Op::Upsample { factor, .. } => {
            let f = *factor;
            let (h, w) = (x[0].shape()[2], x[0].shape()[3]);
            let (ho, wo) = (h * f, w * f);
            let mut d = vec![T::zero(); x[0].len()];
            for (plane, gp) in d.chunks_mut(h * w).zip(gy.data().chunks(ho * wo)) {
                for i in 0..ho {
                    for j in 0..wo {
                        plane[(i / f) * w + j / f] += gp[i * wo + j];
                    }
                }
            }
            vec![Some(like(x[0], d))]
        }
        Op::Reshape { .. } => vec![Some(like(x[0], gy.data().to_vec()))],
        Op::GlobalAvgPool(_) => {
            let hw = x[0].shape()[2] * x[0].shape()[3];
            let scale = T::of(1.0 / hw as f64);
            let d = gy
                .data()
                .iter()
                .flat_map(|&g| std::iter::repeat_n(g * scale, hw))
                .collect();
            vec![Some(like(x[0], d))]
        }
        Op::ExpandCols { cols, .. } => {
            let d = gy.data().chunks(*cols).map(|r| r.iter().copied().sum()).collect();
            vec![Some(like(x[0], d))]
        }
        Op::PairwiseSqDist(..) => {
            let (z, c) = (x[0], x[1]);
            let (n, d, k) = (z.shape()[0], z.shape()[1], c.shape()[0]);
            let two = T::of(2.0);
            let mut gz = vec![T::zero(); n * d];
            let mut gc = vec![T::zero(); k * d];
            for i in 0..n {
                let zi = &z.data()[i * d..(i + 1) * d];
                for j in 0..k {
                    let w = two * gy.data()[i * k + j];
                    if w == T::zero() {
                        continue;
                    }
                    let cj = &c.data()[j * d..(j + 1) * d];
                    for l in 0..d {
                        let diff = w * (zi[l] - cj[l]);
                        gz[i * d + l] += diff;
                        gc[j * d + l] -= diff;
                    }
                }
            }
            vec![
                need[0].then(|| like(z, gz)),
                need[1].then(|| like(c, gc)),
            ]
        }
    };
    Ok(g)
}

fn batch_norm_backward<T: Scalar>(
    id: NodeId,
    x: &[&Tensor<T>],
    gy: &Tensor<T>,
    eps: f64,
    need: &[bool],
    eval: &Evaluation<T>,
) -> std::result::Result<Grads<T>, String> {
    let (input, gamma) = (x[0], x[1]);
    let (c, inner) = channel_layout(input)?;
    let (mean, var, count) = match eval.mode() {
        Mode::Train => {
            let s = eval
                .batch_stats()
                .get(&id)
                .ok_or("missing batch statistics")?;
            (s.mean.clone(), s.var.clone(), s.count)
        }
        Mode::Inference => (x[3].to_f64_vec(), x[4].to_f64_vec(), 0),
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();

    // Per-channel sums of gy and gy * xhat.
    let mut sum_g = vec![0.0f64; c];
    let mut sum_gx = vec![0.0f64; c];
    for (i, (xc, gc)) in input.data().chunks(inner).zip(gy.data().chunks(inner)).enumerate() {
        let ch = i % c;
        for (&xv, &gv) in xc.iter().zip(gc) {
            let xhat = (xv.to_f64() - mean[ch]) * inv_std[ch];
            sum_g[ch] += gv.to_f64();
            sum_gx[ch] += gv.to_f64() * xhat;
        }
    }

    let dx = need[0].then(|| {
        let mut d = Vec::with_capacity(input.len());
        for (i, (xc, gc)) in input.data().chunks(inner).zip(gy.data().chunks(inner)).enumerate() {
            let ch = i % c;
            let gscale = gamma.data()[ch].to_f64() * inv_std[ch];
            match eval.mode() {
                Mode::Train => {
                    let m = count as f64;
                    for (&xv, &gv) in xc.iter().zip(gc) {
                        let xhat = (xv.to_f64() - mean[ch]) * inv_std[ch];
                        let v = gscale * (gv.to_f64() - sum_g[ch] / m - xhat * sum_gx[ch] / m);
                        d.push(T::of(v));
                    }
                }
                Mode::Inference => d.extend(gc.iter().map(|&gv| T::of(gscale * gv.to_f64()))),
            }
        }
        like(input, d)
    });
    let dgamma = need[1].then(|| like(gamma, sum_gx.iter().map(|&v| T::of(v)).collect()));
    let dbeta = need[2].then(|| like(x[2], sum_g.iter().map(|&v| T::of(v)).collect()));
    Ok(vec![dx, dgamma, dbeta, None, None])
}

/// Central finite differences `(f(x + h e_i) - f(x - h e_i)) / 2h`.
pub fn finite_difference_gradient<T: Scalar>(
    mut f: impl FnMut(&Tensor<T>) -> Result<T>,
    x: &Tensor<T>,
    h: T,
) -> Result<Tensor<T>> {
    if h <= T::zero() || !h.is_finite() {
        return Err(Error::InvalidArgument("finite-difference step must be positive".into()));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let fp = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let fm = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        out.push((fp - fm) / (T::of(2.0) * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}
