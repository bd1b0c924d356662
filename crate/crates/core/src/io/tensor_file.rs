//! `RTN1` tensor files: magic, dtype code, rank, little-endian `u32` dims,
//! then the row-major little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{AnyTensor, DType, Tensor};

pub const MAGIC: &[u8; 4] = b"RTN1";

pub fn encode(t: &AnyTensor) -> Result<Vec<u8>> {
    let shape = t.shape();
    if shape.len() > u8::MAX as usize {
        return Err(Error::InvalidArgument(format!("rank {} is too large", shape.len())));
    }
    let mut out = Vec::with_capacity(6 + 4 * shape.len() + shape.iter().product::<usize>() * t.dtype().size());
    out.extend_from_slice(MAGIC);
    out.push(t.dtype().code());
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    match t {
        AnyTensor::U8(t) => out.extend_from_slice(t.data()),
        AnyTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
        AnyTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
    }
    Ok(out)
}

fn take<'a>(bytes: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if bytes.len() < n {
        return Err(Error::Data(format!("tensor file truncated while reading {what}")));
    }
    let (head, tail) = bytes.split_at(n);
    *bytes = tail;
    Ok(head)
}

/// Decodes one tensor from the front of `bytes`, advancing past it.
pub fn decode_from(bytes: &mut &[u8]) -> Result<AnyTensor> {
    if take(bytes, 4, "magic")? != MAGIC {
        return Err(Error::Data("not a tensor file (bad magic)".into()));
    }
    let header = take(bytes, 2, "header")?;
    let dtype = DType::from_code(header[0])
        .ok_or_else(|| Error::Data(format!("unknown dtype code {}", header[0])))?;
    let rank = header[1] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = take(bytes, 4, "dimensions")?;
        shape.push(u32::from_le_bytes(d.try_into().expect("4 bytes")) as usize);
    }
    let len = shape
        .iter()
        .try_fold(1usize, |a, &d| a.checked_mul(d))
        .ok_or_else(|| Error::Data("tensor size overflows".into()))?;
    let payload = take(bytes, len * dtype.size(), "payload")?;
    Ok(match dtype {
        DType::U8 => AnyTensor::U8(Tensor::new(shape, payload.to_vec())?),
        DType::F32 => AnyTensor::F32(Tensor::new(
            shape,
            payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect(),
        )?),
        DType::F64 => AnyTensor::F64(Tensor::new(
            shape,
            payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        )?),
    })
}

/// Decodes a buffer holding exactly one tensor.
pub fn decode(mut bytes: &[u8]) -> Result<AnyTensor> {
    let t = decode_from(&mut bytes)?;
    if !bytes.is_empty() {
        return Err(Error::Data(format!("{} trailing bytes after tensor", bytes.len())));
    }
    Ok(t)
}

pub fn write(path: &Path, t: &AnyTensor) -> Result<()> {
    let bytes = encode(t)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn read(path: &Path) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("cannot open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    decode(&bytes).map_err(|e| match e {
        Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
        other => Error::Data(format!("{}: {other}", path.display())),
    })
}

/// Reads a `[N, C, H, W]` image batch; `u8` data is scaled to `[0, 1]`.
pub fn read_images(path: &Path) -> Result<Tensor<f32>> {
    let t = read(path)?.into_f32_image();
    if t.rank() != 4 {
        return Err(Error::Data(format!(
            "{}: expected images [N, C, H, W], got shape {:?}",
            path.display(),
            t.shape()
        )));
    }
    if t.batch() == 0 {
        return Err(Error::Data(format!("{}: contains no images", path.display())));
    }
    Ok(t)
}

/// Reads a rank-1 label vector of any integer-valued dtype.
pub fn read_labels(path: &Path) -> Result<Vec<usize>> {
    let t = read(path)?;
    if t.shape().len() != 1 {
        return Err(Error::Data(format!("{}: labels must be rank 1", path.display())));
    }
    Ok(match t {
        AnyTensor::U8(t) => t.data().iter().map(|&v| v as usize).collect(),
        AnyTensor::F32(t) => t.data().iter().map(|&v| v as usize).collect(),
        AnyTensor::F64(t) => t.data().iter().map(|&v| v as usize).collect(),
    })
}
