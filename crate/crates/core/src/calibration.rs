//! Synthetic OOD corruptions and selection of ε and τ from ID data alone.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::fpr_at_tpr;
use crate::scoring::Detector;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON_GRID: [f64; 8] = [0.0, 0.0005, 0.001, 0.002, 0.005, 0.01, 0.02, 0.04];
pub const DEFAULT_TARGET_TPR: f64 = 0.95;
pub const MAX_POOL_PER_KIND: usize = 1000;
pub const MIN_THRESHOLD_SCORES: usize = 20;

const JIGSAW_GRID: usize = 4;
const SPECKLE_SIGMA: f64 = 0.2;
const PIXELATE_FACTOR: usize = 4;
const GHOST_SHIFTS: [(isize, isize); 3] = [(2, 0), (0, 2), (-2, -2)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SyntheticOodKind {
    UniformNoise,
    ArithmeticMean,
    GeometricMean,
    Jigsaw,
    Speckle,
    Pixelate,
    RgbGhost,
    Invert,
}

impl SyntheticOodKind {
    pub const ALL: [SyntheticOodKind; 8] = [
        SyntheticOodKind::UniformNoise,
        SyntheticOodKind::ArithmeticMean,
        SyntheticOodKind::GeometricMean,
        SyntheticOodKind::Jigsaw,
        SyntheticOodKind::Speckle,
        SyntheticOodKind::Pixelate,
        SyntheticOodKind::RgbGhost,
        SyntheticOodKind::Invert,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SyntheticOodKind::UniformNoise => "uniform-noise",
            SyntheticOodKind::ArithmeticMean => "arithmetic-mean",
            SyntheticOodKind::GeometricMean => "geometric-mean",
            SyntheticOodKind::Jigsaw => "jigsaw",
            SyntheticOodKind::Speckle => "speckle",
            SyntheticOodKind::Pixelate => "pixelate",
            SyntheticOodKind::RgbGhost => "rgb-ghost",
            SyntheticOodKind::Invert => "invert",
        }
    }

    pub fn needs_partner(self) -> bool {
        matches!(self, SyntheticOodKind::ArithmeticMean | SyntheticOodKind::GeometricMean)
    }
}

impl fmt::Display for SyntheticOodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SyntheticOodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SyntheticOodKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown synthetic OOD kind `{s}`")))
    }
}

/// Rearranges a `[C, H, W]` image's 4x4 patch grid: output patch `p` is input patch `perm[p]`.
pub fn jigsaw(x: &[f32], (c, h, w): (usize, usize, usize), perm: &[usize]) -> Result<Vec<f32>> {
    let g = JIGSAW_GRID;
    if h % g != 0 || w % g != 0 || perm.len() != g * g {
        return Err(Error::Shape(format!("jigsaw needs a {g}x{g} grid dividing {h}x{w}")));
    }
    let (ph, pw) = (h / g, w / g);
    let mut out = vec![0.0; x.len()];
    for ch in 0..c {
        for (dst, &src) in perm.iter().enumerate() {
            let (dr, dc) = (dst / g, dst % g);
            let (sr, sc) = (src / g, src % g);
            for i in 0..ph {
                let from = ch * h * w + (sr * ph + i) * w + sc * pw;
                let to = ch * h * w + (dr * ph + i) * w + dc * pw;
                out[to..to + pw].copy_from_slice(&x[from..from + pw]);
            }
        }
    }
    Ok(out)
}

/// Produces one corrupted image from a `[C, H, W]` ID image with values in `[0, 1]`.
pub fn synthesize(
    kind: SyntheticOodKind,
    x: &[f32],
    shape: (usize, usize, usize),
    partner: Option<&[f32]>,
    rng: &mut impl Rng,
) -> Result<Vec<f32>> {
    let (c, h, w) = shape;
    if x.len() != c * h * w {
        return Err(Error::Shape(format!("image of {} values does not match {shape:?}", x.len())));
    }
    let partner = || -> Result<&[f32]> {
        let p = partner.ok_or_else(|| Error::InvalidArgument(format!("{kind} needs a partner image")))?;
        if p.len() != x.len() {
            return Err(Error::Shape("partner image has a different shape".into()));
        }
        Ok(p)
    };
    Ok(match kind {
        SyntheticOodKind::UniformNoise => (0..x.len()).map(|_| rng.random::<f32>()).collect(),
        SyntheticOodKind::ArithmeticMean => x.iter().zip(partner()?).map(|(a, b)| 0.5 * (a + b)).collect(),
        SyntheticOodKind::GeometricMean => x.iter().zip(partner()?).map(|(a, b)| (a * b).sqrt()).collect(),
        SyntheticOodKind::Jigsaw => {
            let mut perm: Vec<usize> = (0..JIGSAW_GRID * JIGSAW_GRID).collect();
            perm.shuffle(rng);
            jigsaw(x, shape, &perm)?
        }
        SyntheticOodKind::Speckle => {
            let normal = Normal::new(0.0, SPECKLE_SIGMA).expect("positive sigma");
            x.iter()
                .map(|&v| (v + v * normal.sample(rng) as f32).clamp(0.0, 1.0))
                .collect()
        }
        SyntheticOodKind::Pixelate => {
            let f = PIXELATE_FACTOR;
            let mut out = vec![0.0; x.len()];
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        out[(ch * h + i) * w + j] = x[(ch * h + i / f * f) * w + j / f * f];
                    }
                }
            }
            out
        }
        SyntheticOodKind::RgbGhost => {
            let mut out = vec![0.0; x.len()];
            for ch in 0..c {
                let (dy, dx) = GHOST_SHIFTS[ch % GHOST_SHIFTS.len()];
                for i in 0..h {
                    let si = (i as isize - dy).rem_euclid(h as isize) as usize;
                    for j in 0..w {
                        let sj = (j as isize - dx).rem_euclid(w as isize) as usize;
                        out[(ch * h + i) * w + j] = x[(ch * h + si) * w + sj];
                    }
                }
            }
            out
        }
        SyntheticOodKind::Invert => x.iter().map(|&v| 1.0 - v).collect(),
    })
}

/// Equal-count pool of every corruption kind built from ID validation images.
pub fn build_pool(
    validation: &Tensor<f32>,
    per_kind: usize,
    rng: &mut impl Rng,
) -> Result<Vec<(SyntheticOodKind, Tensor<f32>)>> {
    if validation.rank() != 4 || validation.batch() == 0 {
        return Err(Error::Data("synthetic pool needs a non-empty [N, C, H, W] validation set".into()));
    }
    let n = validation.batch();
    let s = validation.shape();
    let shape = (s[1], s[2], s[3]);
    let mut pool = Vec::with_capacity(SyntheticOodKind::ALL.len());
    for kind in SyntheticOodKind::ALL {
        let mut data = Vec::with_capacity(per_kind * validation.item_len());
        for j in 0..per_kind {
            let src = j % n;
            let partner_idx = if n > 1 {
                (src + rng.random_range(1..n)) % n
            } else {
                src
            };
            let partner = kind.needs_partner().then(|| validation.item_slice(partner_idx));
            data.extend(synthesize(kind, validation.item_slice(src), shape, partner, rng)?);
        }
        pool.push((kind, Tensor::new(vec![per_kind, shape.0, shape.1, shape.2], data)?));
    }
    Ok(pool)
}

/// τ such that at least `target_tpr` of `scores` are `>= τ`: the
/// `(floor((1 - tpr) n) + 1)`-th smallest score.
pub fn select_threshold(scores: &[f64], target_tpr: f64) -> Result<f64> {
    if scores.len() < MIN_THRESHOLD_SCORES {
        return Err(Error::Data(format!(
            "threshold selection needs at least {MIN_THRESHOLD_SCORES} ID scores, got {}",
            scores.len()
        )));
    }
    if !(target_tpr > 0.0 && target_tpr <= 1.0) {
        return Err(Error::InvalidArgument(format!("target TPR {target_tpr} must lie in (0, 1]")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    // Guard against (1 - tpr) * n landing a hair below an integer.
    let skip = (((1.0 - target_tpr) * n as f64) + 1e-9).floor() as usize;
    Ok(sorted[skip.min(n - 1)])
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CalibrationResult {
    pub epsilon: f64,
    pub tau: f64,
    pub target_tpr: f64,
    /// Fraction of ID validation scores at or above τ.
    pub validation_tpr: Option<f64>,
    pub grid: Vec<f64>,
    pub kinds: Vec<SyntheticOodKind>,
    /// `fpr[g][k]`: FPR at the target TPR for grid point `g` and kind `k`.
    pub fpr: Vec<Vec<f64>>,
    pub mean_fpr: Vec<f64>,
}

impl CalibrationResult {
    /// A manually chosen operating point without a search table.
    pub fn fixed(epsilon: f64, tau: f64) -> Self {
        CalibrationResult {
            epsilon,
            tau,
            target_tpr: DEFAULT_TARGET_TPR,
            validation_tpr: None,
            grid: Vec::new(),
            kinds: Vec::new(),
            fpr: Vec::new(),
            mean_fpr: Vec::new(),
        }
    }

    /// Mean synthetic-pool FPR at grid value `epsilon`, if it was searched.
    pub fn mean_fpr_at(&self, epsilon: f64) -> Option<f64> {
        self.grid.iter().position(|&e| e == epsilon).map(|i| self.mean_fpr[i])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CalibrationConfig {
    pub grid: Vec<f64>,
    pub target_tpr: f64,
    pub max_pool_per_kind: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            grid: DEFAULT_EPSILON_GRID.to_vec(),
            target_tpr: DEFAULT_TARGET_TPR,
            max_pool_per_kind: MAX_POOL_PER_KIND,
        }
    }
}

/// Searches ε over the grid by mean FPR of ID validation against the
/// synthetic pool (ties to the smaller ε), then sets τ on the validation
/// scores at that ε. The detector's own calibration is not modified.
pub fn search_epsilon(
    detector: &Detector,
    validation: &Tensor<f32>,
    config: &CalibrationConfig,
    rng: &mut impl Rng,
) -> Result<CalibrationResult> {
    if validation.batch() == 0 {
        return Err(Error::Data("validation set is empty".into()));
    }
    let mut grid = config.grid.clone();
    if grid.iter().any(|e| !(*e >= 0.0) || !e.is_finite()) {
        return Err(Error::Config("epsilon grid values must be non-negative".into()));
    }
    grid.sort_by(f64::total_cmp);
    grid.dedup();
    if grid.first() != Some(&0.0) {
        return Err(Error::Config("epsilon grid must include 0".into()));
    }
    let per_kind = config.max_pool_per_kind.min(validation.batch()).max(1);
    let pool = build_pool(validation, per_kind, rng)?;
    let id = detector.prepare(validation)?;
    let ood = pool
        .iter()
        .map(|(_, x)| detector.prepare(x))
        .collect::<Result<Vec<_>>>()?;

    let mut fpr = Vec::with_capacity(grid.len());
    let mut mean_fpr = Vec::with_capacity(grid.len());
    let mut id_scores_at = Vec::with_capacity(grid.len());
    for &eps in &grid {
        let id_scores: Vec<f64> = detector.raw_scores(&id, eps)?.iter().map(|r| r.final_score()).collect();
        let mut row = Vec::with_capacity(pool.len());
        for p in &ood {
            let s: Vec<f64> = detector.raw_scores(p, eps)?.iter().map(|r| r.final_score()).collect();
            row.push(fpr_at_tpr(&id_scores, &s, config.target_tpr)?.fpr);
        }
        let mean = row.iter().sum::<f64>() / row.len() as f64;
        log::info!("calibration: epsilon {eps} mean synthetic FPR {mean:.4}");
        mean_fpr.push(mean);
        fpr.push(row);
        id_scores_at.push(id_scores);
    }
    let mut best = 0;
    for (i, &m) in mean_fpr.iter().enumerate() {
        if m < mean_fpr[best] {
            best = i;
        }
    }
    let tau = select_threshold(&id_scores_at[best], config.target_tpr)?;
    let accepted = id_scores_at[best].iter().filter(|&&s| s >= tau).count();
    Ok(CalibrationResult {
        epsilon: grid[best],
        tau,
        target_tpr: config.target_tpr,
        validation_tpr: Some(accepted as f64 / id_scores_at[best].len() as f64),
        grid,
        kinds: pool.iter().map(|(k, _)| *k).collect(),
        fpr,
        mean_fpr,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, len: usize) -> Vec<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..len).map(|_| rng.random()).collect()
    }

    #[test]
    fn corruption_identities() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let shape = (3, 8, 8);
        let x = image(1, 192);
        let inv = synthesize(SyntheticOodKind::Invert, &x, shape, None, &mut rng).unwrap();
        let back = synthesize(SyntheticOodKind::Invert, &inv, shape, None, &mut rng).unwrap();
        assert!(back.iter().zip(&x).all(|(a, b)| (a - b).abs() < 1e-6));
        let mean = synthesize(SyntheticOodKind::ArithmeticMean, &x, shape, Some(&x), &mut rng).unwrap();
        assert_eq!(mean, x);
        let ident: Vec<usize> = (0..16).collect();
        assert_eq!(jigsaw(&x, shape, &ident).unwrap(), x);
        assert!(synthesize(SyntheticOodKind::GeometricMean, &x, shape, None, &mut rng).is_err());
    }

    #[test]
    fn ghost_and_pixelate_geometry() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x: Vec<f32> = (0..3 * 8 * 8).map(|i| i as f32 / 192.0).collect();
        let g = synthesize(SyntheticOodKind::RgbGhost, &x, (3, 8, 8), None, &mut rng).unwrap();
        // Channel 0 rolled down by two rows.
        assert_eq!(g[2 * 8 + 3], x[3]);
        // Channel 1 rolled right by two columns.
        assert_eq!(g[64 + 2], x[64]);
        // Channel 2 rolled up-left by two.
        assert_eq!(g[128], x[128 + 2 * 8 + 2]);
        let p = synthesize(SyntheticOodKind::Pixelate, &x, (3, 8, 8), None, &mut rng).unwrap();
        assert_eq!(p[8 + 3], x[0]);
        assert_eq!(p[5 * 8 + 6], x[4 * 8 + 4]);
    }

    #[test]
    fn threshold_examples() {
        let s: Vec<f64> = (1..=20).map(f64::from).collect();
        assert_eq!(select_threshold(&s, 0.95).unwrap(), 2.0);
        let s: Vec<f64> = (1..=100).map(f64::from).collect();
        assert_eq!(select_threshold(&s, 0.95).unwrap(), 6.0);
        assert_eq!(select_threshold(&[3.5; 40], 0.95).unwrap(), 3.5);
        assert!(select_threshold(&[1.0; 19], 0.95).is_err());
    }

    proptest! {
        #[test]
        fn threshold_keeps_target_tpr(scores in prop::collection::vec(-100i32..100, 20..400)) {
            let s: Vec<f64> = scores.iter().map(|&v| v as f64 / 4.0).collect();
            let tau = select_threshold(&s, 0.95).unwrap();
            let kept = s.iter().filter(|&&v| v >= tau).count();
            prop_assert!(kept as f64 >= 0.95 * s.len() as f64);
            // τ is the largest such value among the scores.
            let above: Vec<f64> = s.iter().copied().filter(|&v| v > tau).collect();
            if let Some(next) = above.iter().copied().reduce(f64::min) {
                let kept_next = s.iter().filter(|&&v| v >= next).count();
                prop_assert!((kept_next as f64) < 0.95 * s.len() as f64);
            }
        }

        #[test]
        fn synthesized_images_stay_in_range(seed in any::<u64>(), k in 0usize..8) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let kind = SyntheticOodKind::ALL[k];
            let x = image(seed, 3 * 8 * 8);
            let partner = image(seed ^ 1, 3 * 8 * 8);
            let y = synthesize(kind, &x, (3, 8, 8), Some(&partner), &mut rng).unwrap();
            prop_assert_eq!(y.len(), x.len());
            prop_assert!(y.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn kind_names_round_trip() {
        for k in SyntheticOodKind::ALL {
            assert_eq!(k.as_str().parse::<SyntheticOodKind>().unwrap(), k);
        }
    }
}
