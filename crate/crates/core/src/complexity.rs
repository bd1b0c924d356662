//! Compression-based image complexity and the adjustment coefficient λ.

use std::io::Write;

use flate2::write::DeflateEncoder;
use flate2::Compression;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Identifies how complexities were measured, so bounds are only compared
/// against values from the same compressor.
pub const COMPRESSOR_ID: &str = "deflate-raw-9-u8-planar";
pub const DEFAULT_TRIM: f64 = 0.05;
pub const MIN_FIT_SAMPLES: usize = 20;

pub const LAMBDA_WITHIN: f64 = 0.5;
pub const LAMBDA_OUTSIDE: f64 = 1.0;

/// Bits per dimension of one `[C, H, W]` image (values in `[0, 1]`).
pub fn complexity(image: &[f32]) -> Result<f64> {
    if image.is_empty() {
        return Err(Error::InvalidArgument("cannot measure complexity of an empty image".into()));
    }
    let bytes: Vec<u8> = image
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let mut enc = DeflateEncoder::new(Vec::new(), Compression::best());
    enc.write_all(&bytes)?;
    let compressed = enc.finish()?;
    Ok(8.0 * compressed.len() as f64 / image.len() as f64)
}

/// Complexity of every image in a `[N, C, H, W]` batch.
pub fn complexities(images: &Tensor<f32>) -> Result<Vec<f64>> {
    (0..images.batch()).map(|i| complexity(images.item_slice(i))).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OodCharacter {
    Easy,
    /// Inside the ID band: medium OOD or ID.
    Within,
    Hard,
}

impl OodCharacter {
    pub fn as_str(self) -> &'static str {
        match self {
            OodCharacter::Easy => "easy",
            OodCharacter::Within => "within",
            OodCharacter::Hard => "hard",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComplexityBounds {
    pub lower: f64,
    pub upper: f64,
    pub trim: f64,
    pub compressor: String,
}

/// Nearest-rank percentile of sorted data: the `ceil(p * n)`-th smallest value.
pub fn nearest_rank(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    // Guard against p * n landing a hair above an integer.
    let rank = ((p * n as f64) - 1e-9).ceil().max(1.0) as usize;
    sorted[rank.min(n) - 1]
}

/// Trimmed complexity band of the ID training data.
pub fn fit_bounds(complexities: &[f64], trim: f64) -> Result<ComplexityBounds> {
    if complexities.len() < MIN_FIT_SAMPLES {
        return Err(Error::Data(format!(
            "complexity bounds need at least {MIN_FIT_SAMPLES} samples, got {}",
            complexities.len()
        )));
    }
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::InvalidArgument(format!("trim {trim} must lie in [0, 0.5)")));
    }
    if complexities.iter().any(|c| !c.is_finite()) {
        return Err(Error::Data("non-finite complexity value".into()));
    }
    let mut sorted = complexities.to_vec();
    sorted.sort_by(f64::total_cmp);
    Ok(ComplexityBounds {
        lower: nearest_rank(&sorted, trim),
        upper: nearest_rank(&sorted, 1.0 - trim),
        trim,
        compressor: COMPRESSOR_ID.to_string(),
    })
}

impl ComplexityBounds {
    /// Boundary values count as within.
    pub fn characterize(&self, c: f64) -> OodCharacter {
        if c < self.lower {
            OodCharacter::Easy
        } else if c > self.upper {
            OodCharacter::Hard
        } else {
            OodCharacter::Within
        }
    }

    pub fn lambda(&self, c: f64) -> f64 {
        lambda_for(self.characterize(c))
    }
}

pub fn lambda_for(character: OodCharacter) -> f64 {
    match character {
        OodCharacter::Within => LAMBDA_WITHIN,
        OodCharacter::Easy | OodCharacter::Hard => LAMBDA_OUTSIDE,
    }
}
