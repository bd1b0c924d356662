//! Class-conditional Gaussians with a tied covariance.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Covariance regularization: a fixed ridge, or the smallest of an escalating
/// ladder that makes the matrix positive definite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regularization {
    Fixed(f64),
    Auto,
}

const AUTO_REG_START: f64 = 1e-6;
const AUTO_REG_MAX: f64 = 1e-2;

#[derive(Debug, Clone, PartialEq)]
pub struct ClassStats {
    /// `[K, d]`.
    pub means: Tensor<f64>,
    /// `[d, d]`, normalized by the total sample count.
    pub covariance: Tensor<f64>,
    /// Inverse of `covariance + reg * I`.
    pub precision: Tensor<f64>,
    pub reg: f64,
}

fn check_features(features: &Tensor<f64>, labels: &[usize]) -> Result<(usize, usize)> {
    if features.rank() != 2 || features.shape()[0] != labels.len() {
        return Err(Error::Shape(format!(
            "features {:?} do not match {} labels",
            features.shape(),
            labels.len()
        )));
    }
    Ok((features.shape()[0], features.shape()[1]))
}

/// Per-class arithmetic means, `[K, d]`.
pub fn fit_class_means(features: &Tensor<f64>, labels: &[usize], num_classes: usize) -> Result<Tensor<f64>> {
    let (_, d) = check_features(features, labels)?;
    let mut sums = vec![0.0; num_classes * d];
    let mut counts = vec![0usize; num_classes];
    for (row, &y) in features.data().chunks(d).zip(labels) {
        if y >= num_classes {
            return Err(Error::InvalidArgument(format!("label {y} out of range for {num_classes} classes")));
        }
        counts[y] += 1;
        for (s, &v) in sums[y * d..(y + 1) * d].iter_mut().zip(row) {
            *s += v;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }
    for (k, &c) in counts.iter().enumerate() {
        for s in &mut sums[k * d..(k + 1) * d] {
            *s /= c as f64;
        }
    }
    Tensor::new(vec![num_classes, d], sums)
}

/// Mean outer product of the residuals `z - mean[y]`.
pub fn fit_tied_covariance(features: &Tensor<f64>, labels: &[usize], means: &Tensor<f64>) -> Result<Tensor<f64>> {
    let (n, d) = check_features(features, labels)?;
    if n == 0 {
        return Err(Error::Data("cannot fit a covariance from zero samples".into()));
    }
    if means.rank() != 2 || means.shape()[1] != d {
        return Err(Error::Shape(format!("means {:?} do not match feature dim {d}", means.shape())));
    }
    let mut cov = vec![0.0; d * d];
    let mut r = vec![0.0; d];
    for (row, &y) in features.data().chunks(d).zip(labels) {
        if y >= means.shape()[0] {
            return Err(Error::InvalidArgument(format!("label {y} has no fitted mean")));
        }
        for ((ri, &v), &m) in r.iter_mut().zip(row).zip(means.item_slice(y)) {
            *ri = v - m;
        }
        for i in 0..d {
            let ri = r[i];
            for j in i..d {
                cov[i * d + j] += ri * r[j];
            }
        }
    }
    for i in 0..d {
        for j in i..d {
            let v = cov[i * d + j] / n as f64;
            cov[i * d + j] = v;
            cov[j * d + i] = v;
        }
    }
    Tensor::new(vec![d, d], cov)
}

/// Lower-triangular Cholesky factor, or `None` if `a` is not positive definite.
fn cholesky(a: &[f64], d: usize) -> Option<Vec<f64>> {
    let mut l = vec![0.0; d * d];
    for i in 0..d {
        for j in 0..=i {
            let mut s = a[i * d + j];
            for k in 0..j {
                s -= l[i * d + k] * l[j * d + k];
            }
            if i == j {
                if !(s > 0.0) || !s.is_finite() {
                    return None;
                }
                l[i * d + i] = s.sqrt();
            } else {
                l[i * d + j] = s / l[j * d + j];
            }
        }
    }
    Some(l)
}

/// `(L L^T)^{-1}` from the Cholesky factor, symmetrized.
fn cholesky_inverse(l: &[f64], d: usize) -> Vec<f64> {
    // Solve L y = e_c then L^T x = y for each column.
    let mut inv = vec![0.0; d * d];
    let mut y = vec![0.0; d];
    for c in 0..d {
        for i in 0..d {
            let mut s = if i == c { 1.0 } else { 0.0 };
            for k in 0..i {
                s -= l[i * d + k] * y[k];
            }
            y[i] = s / l[i * d + i];
        }
        for i in (0..d).rev() {
            let mut s = y[i];
            for k in i + 1..d {
                s -= l[k * d + i] * inv[k * d + c];
            }
            inv[i * d + c] = s / l[i * d + i];
        }
    }
    for i in 0..d {
        for j in i + 1..d {
            let v = 0.5 * (inv[i * d + j] + inv[j * d + i]);
            inv[i * d + j] = v;
            inv[j * d + i] = v;
        }
    }
    inv
}

/// Inverse of `covariance + reg * I`; returns the precision and the ridge used.
pub fn precision(covariance: &Tensor<f64>, reg: Regularization) -> Result<(Tensor<f64>, f64)> {
    let d = match covariance.shape() {
        [a, b] if a == b && *a > 0 => *a,
        s => return Err(Error::Shape(format!("covariance must be square, got {s:?}"))),
    };
    let a = covariance.data();
    for i in 0..d {
        for j in i + 1..d {
            let (x, y) = (a[i * d + j], a[j * d + i]);
            if (x - y).abs() > 1e-8 * (1.0 + x.abs().max(y.abs())) {
                return Err(Error::InvalidArgument("covariance is not symmetric".into()));
            }
        }
    }
    let attempt = |r: f64| {
        let mut m = a.to_vec();
        for i in 0..d {
            m[i * d + i] += r;
        }
        cholesky(&m, d).map(|l| cholesky_inverse(&l, d))
    };
    let (inv, used) = match reg {
        Regularization::Fixed(r) => {
            if !(r >= 0.0) {
                return Err(Error::InvalidArgument(format!("regularization {r} must be non-negative")));
            }
            (attempt(r).ok_or(Error::NotPositiveDefinite { reg: r })?, r)
        }
        Regularization::Auto => {
            let trace: f64 = (0..d).map(|i| a[i * d + i]).sum();
            // A zero matrix has no scale of its own.
            let scale = if trace > 0.0 { trace / d as f64 } else { 1.0 };
            let mut r = AUTO_REG_START * scale;
            loop {
                if let Some(inv) = attempt(r) {
                    break (inv, r);
                }
                if r >= AUTO_REG_MAX * scale * (1.0 - 1e-12) {
                    return Err(Error::NotPositiveDefinite { reg: r });
                }
                r = (r * 10.0).min(AUTO_REG_MAX * scale);
            }
        }
    };
    Ok((Tensor::new(vec![d, d], inv)?, used))
}

impl ClassStats {
    pub fn fit(features: &Tensor<f64>, labels: &[usize], num_classes: usize, reg: Regularization) -> Result<Self> {
        let means = fit_class_means(features, labels, num_classes)?;
        let covariance = fit_tied_covariance(features, labels, &means)?;
        let (precision, reg) = precision(&covariance, reg)?;
        Ok(ClassStats {
            means,
            covariance,
            precision,
            reg,
        })
    }

    /// Reassembles persisted state; `precision` must match `means`' dimension.
    pub fn from_parts(means: Tensor<f64>, covariance: Tensor<f64>, precision: Tensor<f64>, reg: f64) -> Result<Self> {
        let d = means.shape().get(1).copied().unwrap_or(0);
        if means.rank() != 2 || covariance.shape() != [d, d] || precision.shape() != [d, d] {
            return Err(Error::Shape(format!(
                "inconsistent class statistics: means {:?}, covariance {:?}, precision {:?}",
                means.shape(),
                covariance.shape(),
                precision.shape()
            )));
        }
        Ok(ClassStats {
            means,
            covariance,
            precision,
            reg,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.means.shape()[0]
    }

    pub fn dim(&self) -> usize {
        self.means.shape()[1]
    }

    /// `v^T P v`.
    pub fn quadratic_form(&self, v: &[f64]) -> f64 {
        let d = self.dim();
        let p = self.precision.data();
        let mut total = 0.0;
        for i in 0..d {
            let row = &p[i * d..(i + 1) * d];
            let pv: f64 = row.iter().zip(v).map(|(a, b)| a * b).sum();
            total += v[i] * pv;
        }
        total
    }

    /// Squared Mahalanobis distance from `z` to each class mean.
    pub fn mahalanobis(&self, z: &[f64]) -> Vec<f64> {
        let mut r = vec![0.0; self.dim()];
        (0..self.num_classes())
            .map(|k| {
                for ((ri, &zi), &m) in r.iter_mut().zip(z).zip(self.means.item_slice(k)) {
                    *ri = zi - m;
                }
                self.quadratic_form(&r)
            })
            .collect()
    }

    /// Index and value of the smallest squared Mahalanobis distance; ties go to the smaller class.
    pub fn nearest(&self, z: &[f64]) -> (usize, f64) {
        let d = self.mahalanobis(z);
        let mut best = 0;
        for (i, &v) in d.iter().enumerate() {
            if v < d[best] {
                best = i;
            }
        }
        (best, d[best])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::{DMatrix, DVector};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn means_examples() {
        let f = t(&[3, 2], &[1.0, 1.0, 3.0, 3.0, 7.0, -1.0]);
        let m = fit_class_means(&f, &[0, 0, 1], 2).unwrap();
        assert_eq!(m.data(), &[2.0, 2.0, 7.0, -1.0]);
        match fit_class_means(&f, &[0, 0, 0], 2) {
            Err(Error::EmptyClass(1)) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn means_and_covariance_match_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (n, d, k) = (60, 5, 3);
        let f = Tensor::from_fn(&[n, d], |_| rng.random_range(-3.0..3.0));
        let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
        let m = fit_class_means(&f, &labels, k).unwrap();
        let c = fit_tied_covariance(&f, &labels, &m).unwrap();
        for class in 0..k {
            for j in 0..d {
                let vals: Vec<f64> = (0..n).filter(|&i| labels[i] == class).map(|i| f.data()[i * d + j]).collect();
                let oracle = vals.iter().sum::<f64>() / vals.len() as f64;
                assert!((m.data()[class * d + j] - oracle).abs() < 1e-7);
            }
        }
        for a in 0..d {
            for b in 0..d {
                let mut s = 0.0;
                for i in 0..n {
                    let y = labels[i];
                    s += (f.data()[i * d + a] - m.data()[y * d + a]) * (f.data()[i * d + b] - m.data()[y * d + b]);
                }
                assert!((c.data()[a * d + b] - s / n as f64).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn covariance_examples() {
        let f = t(&[2, 2], &[1.0, 0.0, -1.0, 0.0]);
        let m = fit_class_means(&f, &[0, 0], 1).unwrap();
        assert_eq!(fit_tied_covariance(&f, &[0, 0], &m).unwrap().data(), &[1.0, 0.0, 0.0, 0.0]);
        let f = t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let m = fit_class_means(&f, &[0, 1], 2).unwrap();
        assert!(fit_tied_covariance(&f, &[0, 1], &m).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn precision_examples() {
        let (p, r) = precision(&t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]), Regularization::Fixed(0.0)).unwrap();
        assert_eq!((p.data(), r), (&[1.0, 0.0, 0.0, 1.0][..], 0.0));
        let (p, _) = precision(&t(&[2, 2], &[2.0, 0.0, 0.0, 4.0]), Regularization::Fixed(0.0)).unwrap();
        for (a, b) in p.data().iter().zip([0.5, 0.0, 0.0, 0.25]) {
            assert!((a - b).abs() < 1e-12);
        }
        let singular = t(&[2, 2], &[1.0, 0.0, 0.0, 0.0]);
        assert!(precision(&singular, Regularization::Fixed(0.0)).is_err());
        let (p, r) = precision(&singular, Regularization::Auto).unwrap();
        assert!(r > 0.0);
        // P (C + rI) = I
        let a = [1.0 + r, 0.0, 0.0, r];
        for i in 0..2 {
            for j in 0..2 {
                let v: f64 = (0..2).map(|k| p.data()[i * 2 + k] * a[k * 2 + j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn non_psd_fails_at_max_reg() {
        let bad = t(&[2, 2], &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(precision(&bad, Regularization::Auto), Err(Error::NotPositiveDefinite { .. })));
    }

    proptest! {
        #[test]
        fn covariance_is_psd_and_translation_invariant(
            seed in any::<u64>(),
            shift in prop::collection::vec(-50.0f64..50.0, 4),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d) = (30, 4);
            let f = Tensor::from_fn(&[n, d], |_| rng.random_range(-2.0..2.0));
            let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
            let stats = ClassStats::fit(&f, &labels, 3, Regularization::Auto).unwrap();
            for _ in 0..50 {
                let v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
                let q: f64 = (0..d).flat_map(|i| (0..d).map(move |j| (i, j)))
                    .map(|(i, j)| v[i] * stats.covariance.data()[i * d + j] * v[j]).sum();
                prop_assert!(q >= -1e-8);
            }
            let shifted = Tensor::from_fn(&[n, d], |i| f.data()[i] + shift[i % d]);
            let s2 = ClassStats::fit(&shifted, &labels, 3, Regularization::Auto).unwrap();
            for (a, b) in stats.covariance.data().iter().zip(s2.covariance.data()) {
                prop_assert!((a - b).abs() < 1e-9);
            }
            for (i, (a, b)) in stats.means.data().iter().zip(s2.means.data()).enumerate() {
                prop_assert!((a + shift[i % d] - b).abs() < 1e-9);
            }
        }

        #[test]
        fn mahalanobis_matches_linear_solve(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (n, d) = (40, 6);
            let f = Tensor::from_fn(&[n, d], |_| rng.random_range(-1.0..1.0));
            let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
            let stats = ClassStats::fit(&f, &labels, 2, Regularization::Auto).unwrap();
            let a = DMatrix::from_row_slice(d, d, stats.covariance.data()) + DMatrix::identity(d, d) * stats.reg;
            let lu = a.lu();
            let z: Vec<f64> = (0..d).map(|_| rng.random_range(-2.0..2.0)).collect();
            for (k, got) in stats.mahalanobis(&z).into_iter().enumerate() {
                let r = DVector::from_iterator(d, z.iter().zip(stats.means.item_slice(k)).map(|(a, b)| a - b));
                let x = lu.solve(&r).unwrap();
                let oracle = r.dot(&x);
                prop_assert!((got - oracle).abs() <= 1e-5 * oracle.abs().max(1.0));
            }
        }
    }
}
