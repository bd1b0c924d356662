//! Dense row-major tensors.
//!
//! `Tensor<T>` is generic over its element type. Floating-point element types
//! (`f32`, `f64`) implement [`Scalar`] and can flow through the autodiff engine;
//! `u8` tensors only appear at the file and compression boundary.

use std::fmt;

use crate::error::{Error, Result};

/// Element type tag stored in tensor files.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    U8,
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::U8 => 0,
            DType::F32 => 1,
            DType::F64 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<DType> {
        match code {
            0 => Some(DType::U8),
            1 => Some(DType::F32),
            2 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::U8 => 1,
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

impl fmt::Display for DType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DType::U8 => "u8",
            DType::F32 => "f32",
            DType::F64 => "f64",
        })
    }
}

pub trait Element: Copy + Default + PartialEq + fmt::Debug + Send + Sync + 'static {
    const DTYPE: DType;
}

impl Element for u8 {
    const DTYPE: DType = DType::U8;
}

/// Floating-point element usable by the numeric kernels.
pub trait Scalar:
    Element
    + num_like::Float
    + std::iter::Sum
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
{
    fn of(v: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c = alpha * a·b + beta * c` with explicit row/column strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );
}

/// The handful of float operations the kernels need, without pulling in a
/// numeric-traits crate.
pub mod num_like {
    pub trait Float:
        Copy
        + PartialOrd
        + std::ops::Add<Output = Self>
        + std::ops::Sub<Output = Self>
        + std::ops::Mul<Output = Self>
        + std::ops::Div<Output = Self>
        + std::ops::Neg<Output = Self>
    {
        fn zero() -> Self;
        fn one() -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn max(self, other: Self) -> Self;
        fn is_finite(self) -> bool;
        fn signum_or_zero(self) -> Self;
    }
}

macro_rules! impl_float {
    ($t:ty, $dtype:expr, $gemm:path) => {
        impl Element for $t {
            const DTYPE: DType = $dtype;
        }

        impl num_like::Float for $t {
            #[inline]
            fn zero() -> Self {
                0.0
            }
            #[inline]
            fn one() -> Self {
                1.0
            }
            #[inline]
            fn exp(self) -> Self {
                <$t>::exp(self)
            }
            #[inline]
            fn ln(self) -> Self {
                <$t>::ln(self)
            }
            #[inline]
            fn sqrt(self) -> Self {
                <$t>::sqrt(self)
            }
            #[inline]
            fn abs(self) -> Self {
                <$t>::abs(self)
            }
            #[inline]
            fn max(self, other: Self) -> Self {
                <$t>::max(self, other)
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn signum_or_zero(self) -> Self {
                if self > 0.0 {
                    1.0
                } else if self < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }

        impl Scalar for $t {
            #[inline]
            fn of(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            unsafe fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: *const Self,
                rsa: isize,
                csa: isize,
                b: *const Self,
                rsb: isize,
                csb: isize,
                beta: Self,
                c: *mut Self,
                rsc: isize,
                csc: isize,
            ) {
                $gemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc)
            }
        }
    };
}

impl_float!(f32, DType::F32, matrixmultiply::sgemm);
impl_float!(f64, DType::F64, matrixmultiply::dgemm);

#[derive(Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} elements, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::default(); n],
        }
    }

    pub fn from_fn(shape: &[usize], mut f: impl FnMut(usize) -> T) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: (0..n).map(&mut f).collect(),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn dtype(&self) -> DType {
        T::DTYPE
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        Tensor::new(shape.to_vec(), self.data)
    }

    /// Leading dimension (batch size for image batches).
    pub fn batch(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    /// Number of elements per item along the leading dimension.
    pub fn item_len(&self) -> usize {
        self.shape.iter().skip(1).product()
    }

    /// Item `i` along the leading dimension, keeping a leading dimension of 1.
    pub fn item(&self, i: usize) -> Tensor<T> {
        let len = self.item_len();
        let mut shape = self.shape.clone();
        shape[0] = 1;
        Tensor {
            shape,
            data: self.data[i * len..(i + 1) * len].to_vec(),
        }
    }

    pub fn item_slice(&self, i: usize) -> &[T] {
        let len = self.item_len();
        &self.data[i * len..(i + 1) * len]
    }

    /// Gathers items along the leading dimension.
    pub fn select(&self, indices: &[usize]) -> Tensor<T> {
        let len = self.item_len();
        let mut data = Vec::with_capacity(indices.len() * len);
        for &i in indices {
            data.extend_from_slice(&self.data[i * len..(i + 1) * len]);
        }
        let mut shape = self.shape.clone();
        shape[0] = indices.len();
        Tensor { shape, data }
    }

    /// Stacks equally shaped items (each with leading dimension 1 or without
    /// a batch dimension) into one batch.
    pub fn stack(items: &[Tensor<T>]) -> Result<Tensor<T>> {
        let first = items
            .first()
            .ok_or_else(|| Error::Shape("cannot stack zero tensors".into()))?;
        let item_shape: Vec<usize> = if first.shape.first() == Some(&1) {
            first.shape[1..].to_vec()
        } else {
            first.shape.clone()
        };
        let len: usize = item_shape.iter().product();
        let mut data = Vec::with_capacity(len * items.len());
        for t in items {
            if t.data.len() != len {
                return Err(Error::Shape(format!(
                    "stack: item shape {:?} differs from {:?}",
                    t.shape, item_shape
                )));
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(item_shape);
        Ok(Tensor { shape, data })
    }

    pub fn concat(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("cannot concatenate zero tensors".into()))?;
        let tail = first.shape[1..].to_vec();
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            if p.shape[1..] != tail[..] {
                return Err(Error::Shape(format!(
                    "concat: shape {:?} incompatible with {:?}",
                    p.shape, first.shape
                )));
            }
            n += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        let mut shape = vec![n];
        shape.extend(tail);
        Ok(Tensor { shape, data })
    }

    pub fn map<U: Element>(&self, f: impl Fn(T) -> U) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }
}

impl<T: Scalar> Tensor<T> {
    pub fn scalar(v: T) -> Self {
        Tensor {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Tensor::from_fn(shape, |_| v)
    }

    pub fn from_f64(shape: &[usize], values: &[f64]) -> Result<Self> {
        Tensor::new(shape.to_vec(), values.iter().map(|&v| T::of(v)).collect())
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        self.map(|v| U::of(v.to_f64()))
    }

    pub fn to_f64_vec(&self) -> Vec<f64> {
        self.data.iter().map(|v| v.to_f64()).collect()
    }

    /// Value of a single-element tensor.
    pub fn item_value(&self) -> Option<T> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn min_max(&self) -> Option<(T, T)> {
        let mut it = self.data.iter().copied();
        let first = it.next()?;
        Some(it.fold((first, first), |(lo, hi), v| {
            (if v < lo { v } else { lo }, if v > hi { v } else { hi })
        }))
    }
}

impl<T: Element> fmt::Debug for Tensor<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const SHOWN: usize = 8;
        write!(f, "Tensor<{}>{:?} ", T::DTYPE, self.shape)?;
        if self.data.len() <= SHOWN {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}...", &self.data[..SHOWN])
        }
    }
}

/// A tensor of any supported element type, as read from disk.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    U8(Tensor<u8>),
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::U8(_) => DType::U8,
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::U8(t) => t.shape(),
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `f32`; `u8` values are scaled to `[0, 1]`.
    pub fn into_f32_image(self) -> Tensor<f32> {
        match self {
            AnyTensor::U8(t) => t.map(|v| v as f32 / 255.0),
            AnyTensor::F32(t) => t,
            AnyTensor::F64(t) => t.cast(),
        }
    }

    pub fn into_f32(self) -> Result<Tensor<f32>> {
        match self {
            AnyTensor::F32(t) => Ok(t),
            other => Err(Error::Data(format!("expected f32 tensor, found {}", other.dtype()))),
        }
    }

    pub fn into_f64(self) -> Result<Tensor<f64>> {
        match self {
            AnyTensor::F64(t) => Ok(t),
            other => Err(Error::Data(format!("expected f64 tensor, found {}", other.dtype()))),
        }
    }

    pub fn into_u8(self) -> Result<Tensor<u8>> {
        match self {
            AnyTensor::U8(t) => Ok(t),
            other => Err(Error::Data(format!("expected u8 tensor, found {}", other.dtype()))),
        }
    }
}

impl From<Tensor<u8>> for AnyTensor {
    fn from(t: Tensor<u8>) -> Self {
        AnyTensor::U8(t)
    }
}

impl From<Tensor<f32>> for AnyTensor {
    fn from(t: Tensor<f32>) -> Self {
        AnyTensor::F32(t)
    }
}

impl From<Tensor<f64>> for AnyTensor {
    fn from(t: Tensor<f64>) -> Self {
        AnyTensor::F64(t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_mismatched_length() {
        assert!(Tensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        let t = Tensor::<f32>::new(vec![2, 3], vec![0.0; 6]).unwrap();
        assert_eq!(t.dtype(), DType::F32);
        assert_eq!(Tensor::<f64>::zeros(&[1]).dtype(), DType::F64);
    }

    #[test]
    fn select_and_stack_agree() {
        let t = Tensor::<f32>::from_fn(&[3, 2], |i| i as f32);
        let picked = t.select(&[2, 0]);
        assert_eq!(picked.data(), &[4.0, 5.0, 0.0, 1.0]);
        let stacked = Tensor::stack(&[t.item(2), t.item(0)]).unwrap();
        assert_eq!(stacked, picked);
    }
}
