//! READ scores, aggregation, input perturbation and the detector itself.
//!
//! Both score terms are negated squared distances, so higher means more
//! in-distribution and an input is accepted as ID when its final score is at
//! least the calibrated threshold τ.

use std::cell::OnceCell;

use serde::{Deserialize, Serialize};

use crate::calibration::CalibrationResult;
use crate::class_stats::{ClassStats, Regularization};
use crate::complexity::{self, ComplexityBounds};
use crate::error::{Error, Result};
use crate::models::{predict_from_logits, AutoencoderModel, ClassifierModel, HeadKind};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    /// Mahalanobis distances under a tied-covariance Gaussian fit.
    ReadMd,
    /// Euclidean distances to the centers of a decomposed head.
    ReadEd,
}

impl Variant {
    pub fn as_str(self) -> &'static str {
        match self {
            Variant::ReadMd => "read-md",
            Variant::ReadEd => "read-ed",
        }
    }

    /// Head the classifier is trained with for this variant.
    pub fn head(self) -> HeadKind {
        match self {
            Variant::ReadMd => HeadKind::Standard,
            Variant::ReadEd => HeadKind::Decomposed,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreSign {
    /// `score_cla + λ·score_rec`; ID iff at least τ.
    #[default]
    Standard,
    /// Reports the negated final score. Verdicts are unaffected.
    PaperLiteral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringOptions {
    pub score_sign: ScoreSign,
    /// Clamp perturbed inputs to `[0, 1]`.
    pub clamp_perturbed: bool,
    /// Differentiate through the autoencoder as well when perturbing.
    pub full_graph_gradient: bool,
    /// Samples per internal forward pass.
    pub batch_size: usize,
}

impl Default for ScoringOptions {
    fn default() -> Self {
        ScoringOptions {
            score_sign: ScoreSign::Standard,
            clamp_perturbed: false,
            full_graph_gradient: false,
            batch_size: 128,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    #[serde(rename = "ID")]
    Id,
    #[serde(rename = "OOD")]
    Ood,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Id => "ID",
            Verdict::Ood => "OOD",
        }
    }
}

/// Score components before thresholding.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScore {
    pub score_cla: f64,
    pub score_rec_raw: f64,
    pub complexity: f64,
    pub lambda: f64,
    pub predicted_class: usize,
}

impl RawScore {
    pub fn final_score(&self) -> f64 {
        aggregate(self.score_cla, self.score_rec_raw, self.lambda)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoreBreakdown {
    pub score_cla: f64,
    pub score_rec_raw: f64,
    pub complexity: f64,
    pub lambda: f64,
    pub final_score: f64,
    pub verdict: Verdict,
    pub predicted_class: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// `-min_i (z - μ_i)^T P (z - μ_i)`.
pub fn score_cla_md(z: &[f64], stats: &ClassStats) -> f64 {
    -stats.nearest(z).1
}

/// `-(z_x - z_x̂)^T P (z_x - z_x̂)`.
pub fn score_rec_md(z_x: &[f64], z_x_hat: &[f64], stats: &ClassStats) -> f64 {
    let r: Vec<f64> = z_x.iter().zip(z_x_hat).map(|(a, b)| a - b).collect();
    -stats.quadratic_form(&r)
}

/// Index of the nearest center (ties to the smaller index) and its squared distance.
pub fn nearest_center(z: &[f64], centers: &Tensor<f64>) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for k in 0..centers.batch() {
        let d = sq_dist(z, centers.item_slice(k));
        if d < best.1 {
            best = (k, d);
        }
    }
    best
}

/// `-min_i ||z - ω_i||²`.
pub fn score_cla_ed(z: &[f64], centers: &Tensor<f64>) -> f64 {
    -nearest_center(z, centers).1
}

/// `-||z_x - z_x̂||²`.
pub fn score_rec_ed(z_x: &[f64], z_x_hat: &[f64]) -> f64 {
    -sq_dist(z_x, z_x_hat)
}

pub fn aggregate(score_cla: f64, score_rec: f64, lambda: f64) -> f64 {
    score_cla + lambda * score_rec
}

/// `x + ε·sign(g)` where `g` is the score gradient, optionally clamped.
pub fn perturb_input(x: &Tensor<f32>, gradient: &Tensor<f32>, epsilon: f64, clamp: bool) -> Result<Tensor<f32>> {
    if !(epsilon >= 0.0) || !epsilon.is_finite() {
        return Err(Error::InvalidArgument(format!("epsilon {epsilon} must be a non-negative number")));
    }
    if x.shape() != gradient.shape() {
        return Err(Error::Shape(format!(
            "gradient {:?} does not match input {:?}",
            gradient.shape(),
            x.shape()
        )));
    }
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let eps = epsilon as f32;
    let data = x
        .data()
        .iter()
        .zip(gradient.data())
        .map(|(&v, &g)| {
            let step = if g > 0.0 {
                eps
            } else if g < 0.0 {
                -eps
            } else {
                0.0
            };
            let p = v + step;
            if clamp {
                p.clamp(0.0, 1.0)
            } else {
                p
            }
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}

/// Per-batch quantities that do not depend on ε.
pub struct Prepared {
    x: Tensor<f32>,
    z: Tensor<f32>,
    z_hat: Tensor<f32>,
    complexity: Vec<f64>,
    predicted: Vec<usize>,
    gradient: OnceCell<Tensor<f32>>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.x.batch()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn complexities(&self) -> &[f64] {
        &self.complexity
    }
}

/// Trained networks plus fitted statistics and calibration.
#[derive(Debug, Clone)]
pub struct Detector {
    variant: Variant,
    classifier: ClassifierModel,
    autoencoder: AutoencoderModel,
    stats: Option<ClassStats>,
    bounds: Option<ComplexityBounds>,
    calibration: Option<CalibrationResult>,
    options: ScoringOptions,
    /// Decomposed-head centers in f64, cached.
    centers: Option<Tensor<f64>>,
}

impl Detector {
    pub fn new(
        variant: Variant,
        classifier: ClassifierModel,
        autoencoder: AutoencoderModel,
        options: ScoringOptions,
    ) -> Result<Self> {
        if variant == Variant::ReadEd && classifier.head_kind() != HeadKind::Decomposed {
            return Err(Error::InvalidArgument("read-ed needs a classifier with a decomposed head".into()));
        }
        if classifier.arch().input_shape() != autoencoder.arch().input_shape() {
            return Err(Error::Shape(format!(
                "classifier input {:?} differs from autoencoder input {:?}",
                classifier.arch().input_shape(),
                autoencoder.arch().input_shape()
            )));
        }
        if options.batch_size == 0 {
            return Err(Error::Config("scoring batch_size must be at least 1".into()));
        }
        let centers = classifier.centers().map(|c| c.cast());
        Ok(Detector {
            variant,
            classifier,
            autoencoder,
            stats: None,
            bounds: None,
            calibration: None,
            options,
            centers,
        })
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn classifier(&self) -> &ClassifierModel {
        &self.classifier
    }

    pub fn autoencoder(&self) -> &AutoencoderModel {
        &self.autoencoder
    }

    pub fn stats(&self) -> Option<&ClassStats> {
        self.stats.as_ref()
    }

    pub fn bounds(&self) -> Option<&ComplexityBounds> {
        self.bounds.as_ref()
    }

    pub fn calibration(&self) -> Option<&CalibrationResult> {
        self.calibration.as_ref()
    }

    pub fn options(&self) -> &ScoringOptions {
        &self.options
    }

    pub fn set_options(&mut self, options: ScoringOptions) {
        self.options = options;
    }

    pub fn set_stats(&mut self, stats: Option<ClassStats>) {
        self.stats = stats;
    }

    pub fn set_bounds(&mut self, bounds: Option<ComplexityBounds>) {
        self.bounds = bounds;
    }

    pub fn set_calibration(&mut self, calibration: Option<CalibrationResult>) {
        self.calibration = calibration;
    }

    /// Latents of a batch, evaluated in chunks.
    pub fn features(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        self.chunked(x, |c| self.classifier.features(c))
    }

    fn chunked(&self, x: &Tensor<f32>, f: impl Fn(&Tensor<f32>) -> Result<Tensor<f32>>) -> Result<Tensor<f32>> {
        let n = x.batch();
        if n <= self.options.batch_size {
            return f(x);
        }
        let parts = (0..n)
            .step_by(self.options.batch_size)
            .map(|s| f(&x.select(&(s..(s + self.options.batch_size).min(n)).collect::<Vec<_>>())))
            .collect::<Result<Vec<_>>>()?;
        Tensor::concat(&parts.iter().collect::<Vec<_>>())
    }

    /// Fits class statistics (read-md) and the complexity band on ID training data.
    pub fn fit(&mut self, images: &Tensor<f32>, labels: &[usize], reg: Regularization, trim: f64) -> Result<()> {
        if self.variant == Variant::ReadMd {
            let z = self.features(images)?.cast::<f64>();
            self.stats = Some(ClassStats::fit(&z, labels, self.classifier.num_classes(), reg)?);
        }
        let c = complexity::complexities(images)?;
        self.bounds = Some(complexity::fit_bounds(&c, trim)?);
        Ok(())
    }

    fn require_stats(&self) -> Result<&ClassStats> {
        self.stats.as_ref().ok_or(Error::MissingStage {
            what: "class statistics",
            stage: "fit-stats",
        })
    }

    fn require_bounds(&self) -> Result<&ComplexityBounds> {
        self.bounds.as_ref().ok_or(Error::MissingStage {
            what: "complexity bounds",
            stage: "fit-stats",
        })
    }

    fn cla_and_nearest(&self, z: &[f64]) -> Result<(f64, usize)> {
        Ok(match self.variant {
            Variant::ReadMd => {
                let (k, d) = self.require_stats()?.nearest(z);
                (-d, k)
            }
            Variant::ReadEd => {
                let (k, d) = nearest_center(z, self.centers.as_ref().expect("checked in new"));
                (-d, k)
            }
        })
    }

    fn rec(&self, z: &[f64], z_hat: &[f64]) -> Result<f64> {
        Ok(match self.variant {
            Variant::ReadMd => score_rec_md(z, z_hat, self.require_stats()?),
            Variant::ReadEd => score_rec_ed(z, z_hat),
        })
    }

    /// Applies the metric of the variant (`P v` or `v`).
    fn metric(&self, v: &[f64]) -> Result<Vec<f64>> {
        Ok(match self.variant {
            Variant::ReadMd => {
                let stats = self.require_stats()?;
                let d = stats.dim();
                stats
                    .precision
                    .data()
                    .chunks(d)
                    .map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum())
                    .collect()
            }
            Variant::ReadEd => v.to_vec(),
        })
    }

    fn class_center(&self, k: usize) -> Result<&[f64]> {
        Ok(match self.variant {
            Variant::ReadMd => self.require_stats()?.means.item_slice(k),
            Variant::ReadEd => self.centers.as_ref().expect("checked in new").item_slice(k),
        })
    }

    /// Reconstructs, extracts latents and measures complexity for a batch.
    pub fn prepare(&self, x: &Tensor<f32>) -> Result<Prepared> {
        self.require_bounds()?;
        if self.variant == Variant::ReadMd {
            self.require_stats()?;
        }
        let x_hat = self.chunked(x, |c| self.autoencoder.forward(c))?;
        let z_hat = self.features(&x_hat)?;
        let z = self.features(x)?;
        let logits = self.chunked(&z, |c| self.classifier.head_logits(c))?;
        let predicted = logits
            .data()
            .chunks(self.classifier.num_classes())
            .map(|row| predict_from_logits(row).class)
            .collect();
        Ok(Prepared {
            x: x.clone(),
            z,
            z_hat,
            complexity: complexity::complexities(x)?,
            predicted,
            gradient: OnceCell::new(),
        })
    }

    /// Gradient of `score_cla + score_rec` with respect to the input, `x̂` held fixed
    /// unless full-graph gradients are enabled.
    pub fn score_gradient(&self, x: &Tensor<f32>) -> Result<Tensor<f32>> {
        let x_hat = self.chunked(x, |c| self.autoencoder.forward(c))?;
        let z_hat = self.features(&x_hat)?;
        let z = self.features(x)?;
        self.score_gradient_from(x, &x_hat, &z, &z_hat)
    }

    fn score_gradient_from(
        &self,
        x: &Tensor<f32>,
        x_hat: &Tensor<f32>,
        z: &Tensor<f32>,
        z_hat: &Tensor<f32>,
    ) -> Result<Tensor<f32>> {
        let d = self.classifier.latent_dim();
        let n = x.batch();
        let mut seed_z = Vec::with_capacity(n * d);
        let mut seed_zhat = Vec::with_capacity(n * d);
        for i in 0..n {
            let zi: Vec<f64> = z.item_slice(i).iter().map(|&v| v as f64).collect();
            let zh: Vec<f64> = z_hat.item_slice(i).iter().map(|&v| v as f64).collect();
            let (_, k) = self.cla_and_nearest(&zi)?;
            let to_center: Vec<f64> = zi.iter().zip(self.class_center(k)?).map(|(a, b)| a - b).collect();
            let to_recon: Vec<f64> = zi.iter().zip(&zh).map(|(a, b)| a - b).collect();
            let m_center = self.metric(&to_center)?;
            let m_recon = self.metric(&to_recon)?;
            // d/dz [-(z-c)^T M (z-c) - (z-ẑ)^T M (z-ẑ)], and d/dẑ of the second term.
            seed_z.extend(m_center.iter().zip(&m_recon).map(|(a, b)| (-2.0 * (a + b)) as f32));
            seed_zhat.extend(m_recon.iter().map(|&b| (2.0 * b) as f32));
        }
        let seed_z = Tensor::new(vec![n, d], seed_z)?;
        let mut grad = self.classifier.features_vjp(x, seed_z)?;
        if self.options.full_graph_gradient {
            let seed_zhat = Tensor::new(vec![n, d], seed_zhat)?;
            let g_xhat = self.classifier.features_vjp(x_hat, seed_zhat)?;
            let g_x = self.autoencoder.recon_vjp(x, g_xhat)?;
            for (a, b) in grad.data_mut().iter_mut().zip(g_x.data()) {
                *a += b;
            }
        }
        Ok(grad)
    }

    fn gradient_of(&self, p: &Prepared) -> Result<Tensor<f32>> {
        if let Some(g) = p.gradient.get() {
            return Ok(g.clone());
        }
        let bs = self.options.batch_size;
        let n = p.len();
        let mut parts = Vec::new();
        for s in (0..n).step_by(bs) {
            let idx: Vec<usize> = (s..(s + bs).min(n)).collect();
            let x = p.x.select(&idx);
            let x_hat = if self.options.full_graph_gradient {
                self.autoencoder.forward(&x)?
            } else {
                // Only consumed on the full-graph path.
                Tensor::zeros(&[0])
            };
            parts.push(self.score_gradient_from(&x, &x_hat, &p.z.select(&idx), &p.z_hat.select(&idx))?);
        }
        let g = Tensor::concat(&parts.iter().collect::<Vec<_>>())?;
        let _ = p.gradient.set(g.clone());
        Ok(g)
    }

    /// Score components at perturbation magnitude `epsilon`. The reconstruction,
    /// complexity and predicted class always come from the unperturbed input.
    pub fn raw_scores(&self, p: &Prepared, epsilon: f64) -> Result<Vec<RawScore>> {
        let bounds = self.require_bounds()?;
        let z_eval = if epsilon == 0.0 {
            p.z.clone()
        } else {
            let grad = self.gradient_of(p)?;
            let x_tilde = perturb_input(&p.x, &grad, epsilon, self.options.clamp_perturbed)?;
            self.features(&x_tilde)?
        };
        (0..p.len())
            .map(|i| {
                let z: Vec<f64> = z_eval.item_slice(i).iter().map(|&v| v as f64).collect();
                let zh: Vec<f64> = p.z_hat.item_slice(i).iter().map(|&v| v as f64).collect();
                let (score_cla, _) = self.cla_and_nearest(&z)?;
                let c = p.complexity[i];
                Ok(RawScore {
                    score_cla,
                    score_rec_raw: self.rec(&z, &zh)?,
                    complexity: c,
                    lambda: bounds.lambda(c),
                    predicted_class: p.predicted[i],
                })
            })
            .collect()
    }

    /// Full detection at the calibrated ε and τ.
    pub fn detect(&self, x: &Tensor<f32>) -> Result<Vec<ScoreBreakdown>> {
        let cal = self.calibration.as_ref().ok_or(Error::Uncalibrated)?;
        let p = self.prepare(x)?;
        let raw = self.raw_scores(&p, cal.epsilon)?;
        Ok(raw.iter().map(|r| self.breakdown(r, cal.tau)).collect())
    }

    pub fn breakdown(&self, r: &RawScore, tau: f64) -> ScoreBreakdown {
        let final_score = r.final_score();
        let verdict = if final_score >= tau { Verdict::Id } else { Verdict::Ood };
        ScoreBreakdown {
            score_cla: r.score_cla,
            score_rec_raw: r.score_rec_raw,
            complexity: r.complexity,
            lambda: r.lambda,
            final_score: match self.options.score_sign {
                ScoreSign::Standard => final_score,
                ScoreSign::PaperLiteral => -final_score,
            },
            verdict,
            predicted_class: r.predicted_class,
        }
    }
}
