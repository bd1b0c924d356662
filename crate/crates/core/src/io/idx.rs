//! Importer for unsigned-byte IDX files (MNIST-style images and labels).

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const UBYTE: u8 = 0x08;

pub fn decode(bytes: &[u8]) -> Result<Tensor<u8>> {
    if bytes.len() < 4 || bytes[0] != 0 || bytes[1] != 0 {
        return Err(Error::Data("not an IDX file".into()));
    }
    if bytes[2] != UBYTE {
        return Err(Error::Data(format!("unsupported IDX element type 0x{:02x}", bytes[2])));
    }
    let rank = bytes[3] as usize;
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Data("IDX header truncated".into()));
    }
    let shape: Vec<usize> = bytes[4..header]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes(c.try_into().expect("4 bytes")) as usize)
        .collect();
    let len: usize = shape.iter().product();
    if bytes.len() != header + len {
        return Err(Error::Data(format!(
            "IDX payload has {} bytes, shape {shape:?} needs {len}",
            bytes.len() - header
        )));
    }
    Tensor::new(shape, bytes[header..].to_vec())
}

/// Reads `[N, H, W]` grayscale images as `[N, 1, H, W]`.
pub fn read_images(path: &Path) -> Result<Tensor<u8>> {
    let t = decode(&fs::read(path)?)?;
    if t.rank() != 3 {
        return Err(Error::Data(format!("{}: expected [N, H, W] images", path.display())));
    }
    let s = t.shape().to_vec();
    t.reshape(&[s[0], 1, s[1], s[2]])
}

pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let t = decode(&fs::read(path)?)?;
    if t.rank() != 1 {
        return Err(Error::Data(format!("{}: expected rank-1 labels", path.display())));
    }
    Ok(t.data().iter().map(|&v| v as usize).collect())
}
