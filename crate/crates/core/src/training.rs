//! Optimization of the classifier and the autoencoder.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{self, AutoencoderModel, ClassifierModel, Params, INPUT, LABELS};
use crate::numerics::{self, Bindings, ExprGraph, Mode, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    SgdMomentum,
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub adam_betas: [f64; 2],
    pub adam_eps: f64,
    /// Epochs (0-based) at whose start the learning rate is multiplied by `lr_drop_factor`.
    pub lr_drop_epochs: Vec<usize>,
    pub lr_drop_factor: f64,
    pub random_flip: bool,
    pub random_crop: bool,
    pub crop_pad: usize,
}

impl TrainConfig {
    fn sgd(epochs: usize) -> Self {
        TrainConfig {
            batch_size: 128,
            epochs,
            optimizer: OptimizerKind::SgdMomentum,
            learning_rate: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            adam_betas: [0.9, 0.999],
            adam_eps: 1e-8,
            lr_drop_epochs: vec![epochs / 2, epochs * 3 / 4],
            lr_drop_factor: 0.1,
            random_flip: true,
            random_crop: true,
            crop_pad: 4,
        }
    }

    fn adam(epochs: usize) -> Self {
        TrainConfig {
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            momentum: 0.0,
            weight_decay: 0.0,
            lr_drop_epochs: Vec::new(),
            ..TrainConfig::sgd(epochs)
        }
    }

    pub fn classifier_desk() -> Self {
        TrainConfig::sgd(60)
    }

    pub fn classifier_full() -> Self {
        TrainConfig::sgd(200)
    }

    pub fn autoencoder_desk() -> Self {
        TrainConfig::adam(300)
    }

    pub fn autoencoder_full() -> Self {
        TrainConfig::adam(2000)
    }

    /// Sets the epoch count, rescaling the learning-rate drops proportionally.
    pub fn with_epochs(mut self, epochs: usize) -> Self {
        let old = self.epochs.max(1);
        for e in &mut self.lr_drop_epochs {
            *e = *e * epochs / old;
        }
        self.epochs = epochs;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad("momentum must lie in [0, 1)");
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay must be non-negative");
        }
        if self.adam_betas.iter().any(|b| !(0.0..1.0).contains(b)) || !(self.adam_eps > 0.0) {
            return bad("adam_betas must lie in [0, 1) and adam_eps must be positive");
        }
        if !self.lr_drop_epochs.windows(2).all(|w| w[0] <= w[1])
            || self.lr_drop_epochs.iter().any(|&e| e > self.epochs)
        {
            return bad("lr_drop_epochs must be ascending and within [0, epochs]");
        }
        if !(self.lr_drop_factor > 0.0) {
            return bad("lr_drop_factor must be positive");
        }
        Ok(())
    }

    /// Learning rate in effect during `epoch`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        let drops = self.lr_drop_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.lr_drop_factor.powi(drops as i32)
    }
}

/// Per-epoch mean training loss and learning rate.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

/// Batch mean of `-log softmax(logits)[label]`. `logits` is `[N, K]`.
pub fn cross_entropy_loss(logits: &Tensor<f32>, labels: &[usize]) -> Result<f64> {
    if logits.rank() != 2 || logits.shape()[0] != labels.len() || labels.is_empty() {
        return Err(Error::Shape(format!(
            "logits {:?} do not match {} labels",
            logits.shape(),
            labels.len()
        )));
    }
    let k = logits.shape()[1];
    let mut total = 0.0;
    for (row, &y) in logits.data().chunks(k).zip(labels) {
        if y >= k {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {k} classes")));
        }
        let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
        let lse = max + row.iter().map(|&v| (v as f64 - max).exp()).sum::<f64>().ln();
        total += lse - row[y] as f64;
    }
    Ok(total / labels.len() as f64)
}

/// Batch mean of per-sample summed squared error.
pub fn mse_loss(x: &Tensor<f32>, x_hat: &Tensor<f32>) -> Result<f64> {
    if x.shape() != x_hat.shape() || x.rank() == 0 {
        return Err(Error::Shape(format!(
            "mse shapes differ: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let total: f64 = x
        .data()
        .iter()
        .zip(x_hat.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(total / x.batch().max(1) as f64)
}

/// Reflect-pads one `[C, H, W]` image by `pad`, crops the `H x W` window at
/// `(top, left)` of the padded image, and optionally mirrors it horizontally.
pub fn flip_crop(x: &[f32], c: usize, h: usize, w: usize, flip: bool, pad: usize, top: usize, left: usize) -> Vec<f32> {
    let reflect = |i: isize, n: usize| -> usize {
        let n = n as isize;
        let mut i = i;
        // Single reflection suffices while pad < n.
        if i < 0 {
            i = -i;
        }
        if i >= n {
            i = 2 * (n - 1) - i;
        }
        i.clamp(0, n - 1) as usize
    };
    let mut out = vec![0.0; c * h * w];
    for ch in 0..c {
        let src = &x[ch * h * w..(ch + 1) * h * w];
        for i in 0..h {
            let si = reflect((i + top) as isize - pad as isize, h);
            for j in 0..w {
                let jj = if flip { w - 1 - j } else { j };
                let sj = reflect((jj + left) as isize - pad as isize, w);
                out[(ch * h + i) * w + j] = src[si * w + sj];
            }
        }
    }
    out
}

/// Random horizontal flip (p = 0.5) followed by reflect-pad and random crop.
pub fn augment(x: &Tensor<f32>, config: &TrainConfig, rng: &mut impl Rng) -> Tensor<f32> {
    if x.rank() != 4 {
        return x.clone();
    }
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let pad = if config.random_crop {
        config.crop_pad.min(h - 1).min(w - 1)
    } else {
        0
    };
    let mut data = Vec::with_capacity(x.len());
    for i in 0..x.batch() {
        let flip = config.random_flip && rng.random_bool(0.5);
        let (top, left) = if pad > 0 {
            (rng.random_range(0..=2 * pad), rng.random_range(0..=2 * pad))
        } else {
            (0, 0)
        };
        data.extend(flip_crop(x.item_slice(i), c, h, w, flip, pad, top, left));
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn one_hot(labels: &[usize], k: usize) -> Tensor<f32> {
    let mut t = Tensor::zeros(&[labels.len(), k]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * k + y] = 1.0;
    }
    t
}

struct Optimizer {
    config: TrainConfig,
    first: BTreeMap<String, Vec<f32>>,
    second: BTreeMap<String, Vec<f32>>,
    steps: i32,
}

impl Optimizer {
    fn new(config: &TrainConfig) -> Self {
        Optimizer {
            config: config.clone(),
            first: BTreeMap::new(),
            second: BTreeMap::new(),
            steps: 0,
        }
    }

    fn step(
        &mut self,
        params: &mut Params,
        grads: &BTreeMap<String, Tensor<f32>>,
        lr: f64,
        decay_exempt: impl Fn(&str) -> bool,
    ) {
        self.steps += 1;
        let cfg = &self.config;
        let lr = lr as f32;
        for (name, g) in grads {
            let p = params.get_mut(name).expect("gradient for a known parameter");
            let wd = if decay_exempt(name) { 0.0 } else { cfg.weight_decay as f32 };
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
            match cfg.optimizer {
                OptimizerKind::SgdMomentum => {
                    let mu = cfg.momentum as f32;
                    for ((w, &gi), b) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()) {
                        let d = gi + wd * *w;
                        *b = mu * *b + d;
                        *w -= lr * *b;
                    }
                }
                OptimizerKind::Adam => {
                    let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; g.len()]);
                    let (b1, b2) = (cfg.adam_betas[0], cfg.adam_betas[1]);
                    let c1 = (1.0 - b1.powi(self.steps)) as f32;
                    let c2 = (1.0 - b2.powi(self.steps)) as f32;
                    let (b1, b2, eps) = (b1 as f32, b2 as f32, cfg.adam_eps as f32);
                    for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        let d = gi + wd * *w;
                        *mi = b1 * *mi + (1.0 - b1) * d;
                        *vi = b2 * *vi + (1.0 - b2) * d * d;
                        *w -= lr * (*mi / c1) / ((*vi / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}

/// Shared minibatch loop. `extra` binds per-batch inputs besides the images.
#[allow(clippy::too_many_arguments)]
fn run(
    graph: &ExprGraph,
    loss: NodeId,
    params: &mut Params,
    images: &Tensor<f32>,
    labels: Option<(&[usize], usize)>,
    config: &TrainConfig,
    decay_exempt: impl Fn(&str) -> bool + Copy,
    what: &str,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    config.validate()?;
    let n = images.batch();
    if n < 2 {
        return Err(Error::Data(format!("{what} training needs at least 2 samples")));
    }
    let trainable: Vec<String> = graph.trainable().to_vec();
    let wrt: Vec<&str> = trainable.iter().map(String::as_str).collect();
    let mut opt = Optimizer::new(config);
    let mut report = TrainReport::default();
    let mut order: Vec<usize> = (0..n).collect();
    for epoch in 0..config.epochs {
        let lr = config.lr_at(epoch);
        order.shuffle(rng);
        let (mut total, mut count) = (0.0, 0usize);
        for idx in order.chunks(config.batch_size) {
            // Batch norm needs two samples per batch in train mode.
            if idx.len() < 2 {
                continue;
            }
            let xb = augment(&images.select(idx), config, rng);
            let yb = labels.map(|(l, k)| one_hot(&idx.iter().map(|&i| l[i]).collect::<Vec<_>>(), k));
            let mut b = Bindings::new().extend(params).bind(INPUT, &xb);
            if let Some(yb) = yb.as_ref() {
                b.insert(LABELS, yb);
            }
            let (value, grads, eval) = match numerics::forward_backward(graph, &b, Mode::Train, loss, &wrt) {
                Ok(r) => r,
                Err(Error::NonFinite { .. }) => {
                    return Err(Error::Diverged {
                        epoch,
                        loss: f64::NAN,
                    })
                }
                Err(e) => return Err(e),
            };
            if !value.is_finite() || grads.values().any(|g| !g.all_finite()) {
                return Err(Error::Diverged {
                    epoch,
                    loss: value as f64,
                });
            }
            let stats = eval.batch_stats().clone();
            drop(b);
            models::update_running_stats(graph, params, &stats);
            opt.step(params, &grads, lr, decay_exempt);
            total += value as f64 * idx.len() as f64;
            count += idx.len();
        }
        let mean = total / count.max(1) as f64;
        log::info!("{what} epoch {}/{}: loss {mean:.5} lr {lr}", epoch + 1, config.epochs);
        report.losses.push(mean);
        report.learning_rates.push(lr);
    }
    Ok(report)
}

/// Trains with cross-entropy; ω_i of a decomposed head are exempt from weight decay.
pub fn train_classifier(
    model: &mut ClassifierModel,
    images: &Tensor<f32>,
    labels: &[usize],
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    if labels.len() != images.batch() {
        return Err(Error::Data(format!(
            "{} labels for {} images",
            labels.len(),
            images.batch()
        )));
    }
    let k = model.num_classes();
    if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
        return Err(Error::Data(format!("label {bad} out of range for {k} classes")));
    }
    let graph = model.graph().clone();
    let loss = model.loss_node();
    run(
        &graph,
        loss,
        model.params_mut(),
        images,
        Some((labels, k)),
        config,
        ClassifierModel::decay_exempt,
        "classifier",
        rng,
    )
}

/// Trains with the batch-mean summed squared reconstruction error.
pub fn train_autoencoder(
    model: &mut AutoencoderModel,
    images: &Tensor<f32>,
    config: &TrainConfig,
    rng: &mut impl Rng,
) -> Result<TrainReport> {
    let graph = model.graph().clone();
    let loss = model.loss_node();
    run(
        &graph,
        loss,
        model.params_mut(),
        images,
        None,
        config,
        |_| false,
        "autoencoder",
        rng,
    )
}
