//! Reconstruction-error aggregated out-of-distribution detection.
//!
//! A classifier and an independent autoencoder are trained on in-distribution
//! images. At test time an input's distance to the closest class in the
//! classifier's latent space is combined with the latent-space distance between
//! the input and its reconstruction, the latter rescaled by an image-complexity
//! coefficient. See the crate README for the end-to-end pipeline.

pub mod calibration;
pub mod cli;
pub mod class_stats;
pub mod complexity;
pub mod error;
pub mod evaluation;
pub mod io;
pub mod numerics;
pub mod models;
pub mod scoring;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use tensor::{AnyTensor, DType, Tensor};
