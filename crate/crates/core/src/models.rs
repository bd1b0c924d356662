//! Desk-scale classifier and autoencoder definitions.
//!
//! Both networks are recorded as [`ExprGraph`]s over named parameters held in
//! a [`Params`] map. The classifier has a three-block convolutional feature
//! extractor (`conv -> batch norm -> relu -> 2x downsample`, global average
//! pooling) and either a linear head or a decomposed distance/divisor head.
//! The autoencoder mirrors the same encoder with transposed convolutions.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, Bindings, ExprGraph, Mode, NodeId, Op, BN_MOMENTUM};
use crate::tensor::Tensor;

/// Named parameter and buffer tensors.
pub type Params = BTreeMap<String, Tensor<f32>>;

pub const INPUT: &str = "x";
pub const LABELS: &str = "labels";
pub const LATENT: &str = "z";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HeadKind {
    /// `logits = W z + b`.
    Standard,
    /// `logits_i = -||z - w_i||^2 / sigmoid(bn(w_g . z + b_g))`.
    Decomposed,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassifierArch {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub num_classes: usize,
    pub head: HeadKind,
}

impl ClassifierArch {
    pub fn desk(in_channels: usize, image_size: usize, num_classes: usize, head: HeadKind) -> Self {
        ClassifierArch {
            in_channels,
            image_size,
            channels: vec![16, 32, 64],
            num_classes,
            head,
        }
    }

    pub fn latent_dim(&self) -> usize {
        self.channels.last().copied().unwrap_or(0)
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_size, self.image_size]
    }

    fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument("need at least 2 classes".into()));
        }
        if self.latent_dim() < 2 {
            return Err(Error::InvalidArgument("latent dimension must be at least 2".into()));
        }
        check_image_size(self.image_size, self.channels.len())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AutoencoderArch {
    pub in_channels: usize,
    pub image_size: usize,
    pub channels: Vec<usize>,
    pub bottleneck: usize,
}

impl AutoencoderArch {
    pub fn desk(in_channels: usize, image_size: usize) -> Self {
        AutoencoderArch {
            in_channels,
            image_size,
            channels: vec![16, 32, 64],
            bottleneck: 64,
        }
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.in_channels, self.image_size, self.image_size]
    }

    fn validate(&self) -> Result<()> {
        if self.channels.is_empty() || self.bottleneck == 0 {
            return Err(Error::InvalidArgument("autoencoder needs blocks and a bottleneck".into()));
        }
        check_image_size(self.image_size, self.channels.len())
    }
}

fn check_image_size(size: usize, blocks: usize) -> Result<()> {
    let factor = 1usize << blocks;
    if size == 0 || size % factor != 0 {
        return Err(Error::InvalidArgument(format!(
            "image size {size} must be a positive multiple of {factor}"
        )));
    }
    Ok(())
}

fn check_input(x: &Tensor<f32>, expected: [usize; 3]) -> Result<()> {
    if x.rank() != 4 || x.shape()[1..] != expected {
        return Err(Error::Shape(format!(
            "expected images [N, {}, {}, {}], got {:?}",
            expected[0],
            expected[1],
            expected[2],
            x.shape()
        )));
    }
    Ok(())
}

/// Parameter initialization helper.
struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn new(seed: u64) -> Self {
        Init {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn normal(&mut self, shape: &[usize], std: f64) -> Tensor<f32> {
        let dist = Normal::new(0.0, std).expect("positive std");
        Tensor::from_fn(shape, |_| dist.sample(&mut self.rng) as f32)
    }

    /// He (Kaiming) normal initialization.
    fn he(&mut self, shape: &[usize], fan_in: usize) -> Tensor<f32> {
        self.normal(shape, (2.0 / fan_in as f64).sqrt())
    }
}

fn bn_buffers(params: &mut Params, prefix: &str, c: usize) {
    params.insert(format!("{prefix}.gamma"), Tensor::full(&[c], 1.0));
    params.insert(format!("{prefix}.beta"), Tensor::zeros(&[c]));
    params.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[c]));
    params.insert(format!("{prefix}.running_var"), Tensor::full(&[c], 1.0));
}

/// Appends the convolutional encoder blocks, returning the last feature map.
fn conv_blocks(
    g: &mut ExprGraph,
    params: &mut Params,
    init: &mut Init,
    prefix: &str,
    mut x: NodeId,
    in_channels: usize,
    channels: &[usize],
) -> NodeId {
    let mut cin = in_channels;
    for (i, &cout) in channels.iter().enumerate() {
        let p = format!("{prefix}.block{i}");
        let wname = format!("{p}.conv.weight");
        let w = g.param(&wname);
        params.insert(wname, init.he(&[cout, cin, 3, 3], cin * 9));
        let y = g.conv2d(x, w, 1, 1);
        let y = g.batch_norm(y, &format!("{p}.bn"));
        bn_buffers(params, &format!("{p}.bn"), cout);
        let y = g.relu(y);
        x = g.downsample(y, 2);
        cin = cout;
    }
    x
}

/// Head nodes appended after a latent node.
#[derive(Debug, Clone, Copy)]
struct HeadNodes {
    logits: NodeId,
    numerator: Option<NodeId>,
    divisor: Option<NodeId>,
}

fn build_head(g: &mut ExprGraph, z: NodeId, arch: &ClassifierArch) -> HeadNodes {
    let k = arch.num_classes;
    match arch.head {
        HeadKind::Standard => {
            let w = g.param("head.weight");
            let b = g.param("head.bias");
            let wt = g.transpose(w);
            let zw = g.matmul(z, wt);
            let logits = g.bias_add(zw, b);
            HeadNodes {
                logits,
                numerator: None,
                divisor: None,
            }
        }
        HeadKind::Decomposed => {
            let centers = g.param("head.centers");
            let dist = g.pairwise_sq_dist(z, centers);
            let numerator = g.mul_scalar(dist, -1.0);
            let wg = g.param("head.divisor.weight");
            let bg = g.param("head.divisor.bias");
            let lin = g.matmul(z, wg);
            let lin = g.bias_add(lin, bg);
            let normed = g.batch_norm(lin, "head.divisor.bn");
            let divisor = g.sigmoid(normed);
            let expanded = g.expand_cols(divisor, k);
            let logits = g.div(numerator, expanded);
            HeadNodes {
                logits,
                numerator: Some(numerator),
                divisor: Some(divisor),
            }
        }
    }
}

fn init_head(params: &mut Params, init: &mut Init, arch: &ClassifierArch) {
    let (k, d) = (arch.num_classes, arch.latent_dim());
    match arch.head {
        HeadKind::Standard => {
            params.insert("head.weight".into(), init.normal(&[k, d], (1.0 / d as f64).sqrt()));
            params.insert("head.bias".into(), Tensor::zeros(&[k]));
        }
        HeadKind::Decomposed => {
            params.insert("head.centers".into(), init.he(&[k, d], d));
            params.insert(
                "head.divisor.weight".into(),
                init.normal(&[d, 1], (1.0 / d as f64).sqrt()),
            );
            params.insert("head.divisor.bias".into(), Tensor::zeros(&[1]));
            bn_buffers(params, "head.divisor.bn", 1);
        }
    }
}

/// Class posterior and decision for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub posterior: Vec<f64>,
}

/// Softmax posterior and argmax class; ties go to the smaller class id.
pub fn predict_from_logits(logits: &[f32]) -> Prediction {
    let max = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let exps: Vec<f64> = logits.iter().map(|&v| (v as f64 - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    let posterior: Vec<f64> = exps.iter().map(|e| e / total).collect();
    let mut class = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[class] {
            class = i;
        }
    }
    Prediction { class, posterior }
}

#[derive(Debug, Clone)]
pub struct ClassifierModel {
    arch: ClassifierArch,
    params: Params,
    /// `x -> z -> logits -> loss`.
    graph: ExprGraph,
    /// `z -> logits`, with `z` as a leaf.
    head_graph: ExprGraph,
    z: NodeId,
    logits: NodeId,
    loss: NodeId,
    head_logits: NodeId,
    head_numerator: Option<NodeId>,
    head_divisor: Option<NodeId>,
}

impl ClassifierModel {
    pub fn new(arch: ClassifierArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut init = Init::new(seed);
        let mut params = Params::new();
        let mut g = ExprGraph::new();
        let x = g.input(INPUT);
        let fmap = conv_blocks(&mut g, &mut params, &mut init, "fe", x, arch.in_channels, &arch.channels);
        let z = g.global_avg_pool(fmap);
        init_head(&mut params, &mut init, &arch);
        let head = build_head(&mut g, z, &arch);
        // Cross-entropy as -K * mean(onehot * log_softmax) = batch mean of -log p_y.
        let onehot = g.input(LABELS);
        let logp = g.log_softmax(head.logits);
        let picked = g.mul(logp, onehot);
        let mean = g.mean(picked);
        let loss = g.mul_scalar(mean, -(arch.num_classes as f64));
        g.set_output(LATENT, z);
        g.set_output("logits", head.logits);
        g.set_output("loss", loss);

        let mut hg = ExprGraph::new();
        let hz = hg.input(LATENT);
        let hh = build_head(&mut hg, hz, &arch);
        Ok(ClassifierModel {
            arch,
            params,
            graph: g,
            head_graph: hg,
            z,
            logits: head.logits,
            loss,
            head_logits: hh.logits,
            head_numerator: hh.numerator,
            head_divisor: hh.divisor,
        })
    }

    /// Rebuilds a model and replaces its tensors with `params`.
    pub fn from_params(arch: ClassifierArch, params: Params) -> Result<Self> {
        let mut model = ClassifierModel::new(arch, 0)?;
        model.load_params(params)?;
        Ok(model)
    }

    pub fn arch(&self) -> &ClassifierArch {
        &self.arch
    }

    pub fn head_kind(&self) -> HeadKind {
        self.arch.head
    }

    pub fn num_classes(&self) -> usize {
        self.arch.num_classes
    }

    pub fn latent_dim(&self) -> usize {
        self.arch.latent_dim()
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn graph(&self) -> &ExprGraph {
        &self.graph
    }

    pub fn latent_node(&self) -> NodeId {
        self.z
    }

    pub fn logits_node(&self) -> NodeId {
        self.logits
    }

    pub fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub fn parameter_count(&self) -> usize {
        self.graph
            .trainable()
            .iter()
            .map(|n| self.params[n].len())
            .sum()
    }

    /// Class centers of a decomposed head, `[K, d]`.
    pub fn centers(&self) -> Option<&Tensor<f32>> {
        match self.arch.head {
            HeadKind::Decomposed => self.params.get("head.centers"),
            HeadKind::Standard => None,
        }
    }

    pub fn load_params(&mut self, params: Params) -> Result<()> {
        for (name, t) in &self.params {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        self.params = params;
        Ok(())
    }

    /// Latents and logits in inference mode.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        check_input(x, self.arch.input_shape())?;
        let b = Bindings::new().extend(&self.params).bind(INPUT, x);
        let mut e = numerics::evaluate(&self.graph, &b, Mode::Inference, &[self.logits])?;
        let z = e.take(self.z).expect("evaluated");
        let logits = e.take(self.logits).expect("evaluated");
        Ok((z, logits))
    }

    pub fn features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_input(x, self.arch.input_shape())?;
        let b = Bindings::new().extend(&self.params).bind(INPUT, x);
        let mut e = numerics::evaluate(&self.graph, &b, Mode::Inference, &[self.z])?;
        Ok(e.take(self.z).expect("evaluated"))
    }

    /// Pulls a cotangent `seed` on the latents `[N, d]` back to the input images.
    pub fn features_vjp(&self, x: &Tensor<f32>, seed: Tensor<f32>) -> Result<Tensor<f32>> {
        check_input(x, self.arch.input_shape())?;
        let b = Bindings::new().extend(&self.params).bind(INPUT, x);
        let e = numerics::evaluate(&self.graph, &b, Mode::Inference, &[self.z])?;
        let mut g = numerics::vjp(&self.graph, &e, self.z, seed, &[INPUT])?;
        Ok(g.remove(INPUT).expect("requested"))
    }

    /// Head logits for given latents `[N, d]` (inference mode).
    pub fn head_logits(&self, z: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.check_latent(z)?;
        let b = Bindings::new().extend(&self.params).bind(LATENT, z);
        let mut e = numerics::evaluate(&self.head_graph, &b, Mode::Inference, &[self.head_logits])?;
        Ok(e.take(self.head_logits).expect("evaluated"))
    }

    /// Numerator `h_i(z)` `[N, K]` and divisor `g(z)` `[N, 1]` of a decomposed head.
    pub fn head_parts(&self, z: &Tensor<f32>) -> Result<(Tensor<f32>, Tensor<f32>)> {
        let (Some(h), Some(gd)) = (self.head_numerator, self.head_divisor) else {
            return Err(Error::InvalidArgument("standard head has no numerator/divisor".into()));
        };
        self.check_latent(z)?;
        let b = Bindings::new().extend(&self.params).bind(LATENT, z);
        let mut e = numerics::evaluate(&self.head_graph, &b, Mode::Inference, &[h, gd])?;
        Ok((e.take(h).expect("evaluated"), e.take(gd).expect("evaluated")))
    }

    fn check_latent(&self, z: &Tensor<f32>) -> Result<()> {
        if z.rank() != 2 || z.shape()[1] != self.latent_dim() {
            return Err(Error::Shape(format!(
                "expected latents [N, {}], got {:?}",
                self.latent_dim(),
                z.shape()
            )));
        }
        Ok(())
    }

    pub fn predict(&self, x: &Tensor<f32>) -> Result<Vec<Prediction>> {
        let (_, logits) = self.forward(x)?;
        Ok(logits
            .data()
            .chunks(self.num_classes())
            .map(predict_from_logits)
            .collect())
    }

    /// Fraction of correctly classified samples, evaluated in batches.
    pub fn accuracy(&self, x: &Tensor<f32>, labels: &[usize], batch: usize) -> Result<f64> {
        let mut correct = 0usize;
        for start in (0..x.batch()).step_by(batch.max(1)) {
            let idx: Vec<usize> = (start..(start + batch).min(x.batch())).collect();
            let preds = self.predict(&x.select(&idx))?;
            correct += preds
                .iter()
                .zip(&idx)
                .filter(|(p, &i)| p.class == labels[i])
                .count();
        }
        Ok(correct as f64 / x.batch().max(1) as f64)
    }

    /// Weight decay does not apply to the class centers of a decomposed head.
    pub fn decay_exempt(name: &str) -> bool {
        name == "head.centers"
    }
}

#[derive(Debug, Clone)]
pub struct AutoencoderModel {
    arch: AutoencoderArch,
    params: Params,
    graph: ExprGraph,
    code: NodeId,
    recon: NodeId,
    loss: NodeId,
}

impl AutoencoderModel {
    pub fn new(arch: AutoencoderArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut init = Init::new(seed);
        let mut params = Params::new();
        let mut g = ExprGraph::new();
        let x = g.input(INPUT);
        let fmap = conv_blocks(&mut g, &mut params, &mut init, "enc", x, arch.in_channels, &arch.channels);

        let blocks = arch.channels.len();
        let side = arch.image_size >> blocks;
        let top = *arch.channels.last().expect("validated");
        let flat = top * side * side;
        let b = arch.bottleneck;

        let flat_x = g.reshape(fmap, &[-1, flat as isize]);
        let w = g.param("enc.fc.weight");
        let bias = g.param("enc.fc.bias");
        params.insert("enc.fc.weight".into(), init.he(&[flat, b], flat));
        params.insert("enc.fc.bias".into(), Tensor::zeros(&[b]));
        let code = g.matmul(flat_x, w);
        let code = g.bias_add(code, bias);

        let w = g.param("dec.fc.weight");
        let bias = g.param("dec.fc.bias");
        params.insert("dec.fc.weight".into(), init.he(&[b, flat], b));
        params.insert("dec.fc.bias".into(), Tensor::zeros(&[flat]));
        let h = g.matmul(code, w);
        let h = g.bias_add(h, bias);
        let h = g.relu(h);
        let mut y = g.reshape(h, &[-1, top as isize, side as isize, side as isize]);

        // Mirror of the encoder: each transposed conv doubles the resolution.
        let mut cin = top;
        let outs: Vec<usize> = arch.channels.iter().rev().skip(1).copied().collect();
        for (i, &cout) in outs.iter().enumerate() {
            let p = format!("dec.block{i}");
            let wname = format!("{p}.deconv.weight");
            let w = g.param(&wname);
            params.insert(wname, init.he(&[cin, cout, 4, 4], cin * 4));
            y = g.conv_transpose2d(y, w, 2, 1);
            y = g.batch_norm(y, &format!("{p}.bn"));
            bn_buffers(&mut params, &format!("{p}.bn"), cout);
            y = g.relu(y);
            cin = cout;
        }
        let w = g.param("dec.out.deconv.weight");
        let bias = g.param("dec.out.bias");
        params.insert("dec.out.deconv.weight".into(), init.he(&[cin, arch.in_channels, 4, 4], cin * 4));
        params.insert("dec.out.bias".into(), Tensor::zeros(&[arch.in_channels]));
        let y = g.conv_transpose2d(y, w, 2, 1);
        let y = g.bias_add(y, bias);
        let recon = g.sigmoid(y);

        // Batch mean of per-sample squared error: mean over all elements
        // times the per-sample element count.
        let diff = g.sub(recon, x);
        let sq = g.square(diff);
        let mean = g.mean(sq);
        let per_sample = (arch.in_channels * arch.image_size * arch.image_size) as f64;
        let loss = g.mul_scalar(mean, per_sample);
        g.set_output("code", code);
        g.set_output("recon", recon);
        g.set_output("loss", loss);
        Ok(AutoencoderModel {
            arch,
            params,
            graph: g,
            code,
            recon,
            loss,
        })
    }

    pub fn from_params(arch: AutoencoderArch, params: Params) -> Result<Self> {
        let mut model = AutoencoderModel::new(arch, 0)?;
        model.load_params(params)?;
        Ok(model)
    }

    pub fn arch(&self) -> &AutoencoderArch {
        &self.arch
    }

    pub fn params(&self) -> &Params {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut Params {
        &mut self.params
    }

    pub fn graph(&self) -> &ExprGraph {
        &self.graph
    }

    pub fn recon_node(&self) -> NodeId {
        self.recon
    }

    pub fn loss_node(&self) -> NodeId {
        self.loss
    }

    pub fn parameter_count(&self) -> usize {
        self.graph
            .trainable()
            .iter()
            .map(|n| self.params[n].len())
            .sum()
    }

    pub fn load_params(&mut self, params: Params) -> Result<()> {
        for (name, t) in &self.params {
            let got = params
                .get(name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
            if got.shape() != t.shape() {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    got.shape(),
                    t.shape()
                )));
            }
        }
        if let Some(extra) = params.keys().find(|k| !self.params.contains_key(*k)) {
            return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
        }
        self.params = params;
        Ok(())
    }

    /// Reconstruction in inference mode; same shape as `x`, values in `[0, 1]`.
    pub fn forward(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_input(x, self.arch.input_shape())?;
        let b = Bindings::new().extend(&self.params).bind(INPUT, x);
        let mut e = numerics::evaluate(&self.graph, &b, Mode::Inference, &[self.recon])?;
        Ok(e.take(self.recon).expect("evaluated"))
    }

    /// Pulls a cotangent on the reconstruction back to the input images.
    pub fn recon_vjp(&self, x: &Tensor<f32>, seed: Tensor<f32>) -> Result<Tensor<f32>> {
        check_input(x, self.arch.input_shape())?;
        let b = Bindings::new().extend(&self.params).bind(INPUT, x);
        let e = numerics::evaluate(&self.graph, &b, Mode::Inference, &[self.recon])?;
        let mut g = numerics::vjp(&self.graph, &e, self.recon, seed, &[INPUT])?;
        Ok(g.remove(INPUT).expect("requested"))
    }

    pub fn encode(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        check_input(x, self.arch.input_shape())?;
        let b = Bindings::new().extend(&self.params).bind(INPUT, x);
        let mut e = numerics::evaluate(&self.graph, &b, Mode::Inference, &[self.code])?;
        Ok(e.take(self.code).expect("evaluated"))
    }
}

/// Folds train-mode batch statistics into the running-statistics buffers.
pub(crate) fn update_running_stats(
    graph: &ExprGraph,
    params: &mut Params,
    stats: &BTreeMap<NodeId, numerics::BatchStats>,
) {
    let m = BN_MOMENTUM;
    for (&node, s) in stats {
        let Op::BatchNorm {
            running_mean,
            running_var,
            ..
        } = graph.op(node)
        else {
            continue;
        };
        let (Op::Leaf(mean_name), Op::Leaf(var_name)) = (graph.op(*running_mean), graph.op(*running_var))
        else {
            continue;
        };
        // Running variance uses the unbiased estimate.
        let correction = if s.count > 1 {
            s.count as f64 / (s.count - 1) as f64
        } else {
            1.0
        };
        if let Some(rm) = params.get_mut(mean_name) {
            for (r, &b) in rm.data_mut().iter_mut().zip(&s.mean) {
                *r = ((1.0 - m) * *r as f64 + m * b) as f32;
            }
        }
        if let Some(rv) = params.get_mut(var_name) {
            for (r, &b) in rv.data_mut().iter_mut().zip(&s.var) {
                *r = ((1.0 - m) * *r as f64 + m * b * correction) as f32;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn tiny_arch(head: HeadKind) -> ClassifierArch {
        ClassifierArch {
            in_channels: 3,
            image_size: 8,
            channels: vec![4, 4, 6],
            num_classes: 3,
            head,
        }
    }

    #[test]
    fn decomposed_head_at_a_center_predicts_that_class() {
        let model = ClassifierModel::new(tiny_arch(HeadKind::Decomposed), 1).unwrap();
        let centers = model.centers().unwrap().clone();
        let d = model.latent_dim();
        let z = Tensor::new(vec![1, d], centers.item_slice(1).to_vec()).unwrap();
        let logits = model.head_logits(&z).unwrap();
        assert_eq!(logits.data()[1], 0.0);
        assert!(logits.data()[0] < 0.0 && logits.data()[2] < 0.0);
        assert_eq!(predict_from_logits(logits.data()).class, 1);
    }

    #[test]
    fn decomposed_argmax_is_nearest_center() {
        let model = ClassifierModel::new(tiny_arch(HeadKind::Decomposed), 2).unwrap();
        let centers = model.centers().unwrap();
        let d = model.latent_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let z = Tensor::from_fn(&[100, d], |_| rng.random_range(-2.0f32..2.0));
        let logits = model.head_logits(&z).unwrap();
        let (_, g) = model.head_parts(&z).unwrap();
        assert!(g.data().iter().all(|&v| v > 0.0 && v < 1.0));
        for (zi, row) in z.data().chunks(d).zip(logits.data().chunks(3)) {
            let nearest = (0..3)
                .min_by(|&a, &b| {
                    let da: f32 = zi.iter().zip(centers.item_slice(a)).map(|(p, q)| (p - q).powi(2)).sum();
                    let db: f32 = zi.iter().zip(centers.item_slice(b)).map(|(p, q)| (p - q).powi(2)).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            assert_eq!(predict_from_logits(row).class, nearest);
        }
    }

    #[test]
    fn standard_identity_head() {
        let mut arch = tiny_arch(HeadKind::Standard);
        arch.channels = vec![4, 4, 3];
        let mut model = ClassifierModel::new(arch, 0).unwrap();
        let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
        model.params_mut().insert("head.weight".into(), eye);
        let z = Tensor::new(vec![1, 3], vec![0.0, 1.0, 0.0]).unwrap();
        let logits = model.head_logits(&z).unwrap();
        assert_eq!(predict_from_logits(logits.data()).class, 1);
    }

    #[test]
    fn predict_tie_breaking() {
        assert_eq!(predict_from_logits(&[2.0, 1.0, 0.0]).class, 0);
        let p = predict_from_logits(&[0.5, 0.5, 0.5]);
        assert_eq!(p.class, 0);
        assert!((p.posterior.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn forward_shapes_and_errors() {
        let model = ClassifierModel::new(tiny_arch(HeadKind::Standard), 0).unwrap();
        let x = Tensor::full(&[2, 3, 8, 8], 0.5);
        let (z, logits) = model.forward(&x).unwrap();
        assert_eq!(z.shape(), &[2, 6]);
        assert_eq!(logits.shape(), &[2, 3]);
        assert!(model.forward(&Tensor::full(&[2, 1, 8, 8], 0.5)).is_err());
        assert!(ClassifierModel::new(
            ClassifierArch {
                num_classes: 1,
                ..tiny_arch(HeadKind::Standard)
            },
            0
        )
        .is_err());
    }

    #[test]
    fn untrained_autoencoder_is_well_formed() {
        let ae = AutoencoderModel::new(
            AutoencoderArch {
                in_channels: 3,
                image_size: 8,
                channels: vec![4, 4, 6],
                bottleneck: 5,
            },
            0,
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = Tensor::from_fn(&[2, 3, 8, 8], |_| rng.random::<f32>());
        let r = ae.forward(&x).unwrap();
        assert_eq!(r.shape(), x.shape());
        let (lo, hi) = r.min_max().unwrap();
        assert!(lo >= 0.0 && hi <= 1.0);
        let err: f32 = r.data().iter().zip(x.data()).map(|(a, b)| (a - b).powi(2)).sum();
        assert!(err.is_finite());
    }

    #[test]
    fn zero_decoder_outputs_half() {
        let mut ae = AutoencoderModel::new(AutoencoderArch::desk(3, 16), 0).unwrap();
        for (name, t) in ae.params_mut().iter_mut() {
            if name.starts_with("dec.") && !name.contains("running_var") {
                t.data_mut().fill(0.0);
            }
        }
        let r = ae.forward(&Tensor::zeros(&[1, 3, 16, 16])).unwrap();
        assert!(r.data().iter().all(|&v| v == 0.5));
    }
}
