//! Dense kernels behind the graph ops: GEMM wrappers and im2col convolution.

use crate::tensor::Scalar;

/// `c = a·b + beta·c` where `a` is `[m, k]` (or its transpose stored as
/// `[k, m]` when `ta`) and `b` is `[k, n]` (or `[n, k]` when `tb`).
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    ta: bool,
    b: &[T],
    tb: bool,
    beta: T,
    c: &mut [T],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if ta { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if tb { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strided access touches.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::one(),
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of one convolution window sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn valid(&self) -> bool {
        self.stride > 0
            && self.kh > 0
            && self.kw > 0
            && self.height + 2 * self.pad >= self.kh
            && self.width + 2 * self.pad >= self.kw
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn col_cols(&self) -> usize {
        self.out_height() * self.out_width()
    }
}

/// Unfolds one `[C, H, W]` image into `[C*kh*kw, Ho*Wo]` columns.
pub fn im2col<T: Scalar>(x: &[T], g: &ConvGeom, cols: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    for c in 0..g.channels {
        let xc = &x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oi * wo..(oi + 1) * wo];
                    if ii < 0 || ii >= g.height as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &xc[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for (oj, o) in out_row.iter_mut().enumerate() {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        *o = if jj < 0 || jj >= g.width as isize {
                            T::zero()
                        } else {
                            src[jj as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into a `[C, H, W]` image.
pub fn col2im<T: Scalar>(cols: &[T], g: &ConvGeom, x: &mut [T]) {
    let (ho, wo) = (g.out_height(), g.out_width());
    let plane = ho * wo;
    for c in 0..g.channels {
        let xc = &mut x[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oi in 0..ho {
                    let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                    if ii < 0 || ii >= g.height as isize {
                        continue;
                    }
                    let dst = &mut xc[ii as usize * g.width..(ii as usize + 1) * g.width];
                    for oj in 0..wo {
                        let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                        if jj >= 0 && jj < g.width as isize {
                            dst[jj as usize] += src[oi * wo + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Forward convolution. `x`: `[N, C, H, W]`, `w`: `[Co, C, kh, kw]`.
pub fn conv2d<T: Scalar>(x: &[T], n: usize, g: &ConvGeom, w: &[T], co: usize) -> Vec<T> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_len = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut y = vec![T::zero(); n * co * cols_n];
    for s in 0..n {
        im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
        gemm(
            co,
            rows,
            cols_n,
            w,
            false,
            &cols,
            false,
            T::zero(),
            &mut y[s * co * cols_n..(s + 1) * co * cols_n],
        );
    }
    y
}

/// Gradients of [`conv2d`] with respect to input and weight.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    g: &ConvGeom,
    w: &[T],
    co: usize,
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let in_len = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut dx = need_dx.then(|| vec![T::zero(); n * in_len]);
    let mut dw = need_dw.then(|| vec![T::zero(); co * rows]);
    for s in 0..n {
        let dy_s = &dy[s * co * cols_n..(s + 1) * co * cols_n];
        if let Some(dw) = dw.as_mut() {
            im2col(&x[s * in_len..(s + 1) * in_len], g, &mut cols);
            gemm(co, cols_n, rows, dy_s, false, &cols, true, T::one(), dw);
        }
        if let Some(dx) = dx.as_mut() {
            gemm(rows, co, cols_n, w, true, dy_s, false, T::zero(), &mut cols);
            col2im(&cols, g, &mut dx[s * in_len..(s + 1) * in_len]);
        }
    }
    (dx, dw)
}

/// Forward transposed convolution. `x`: `[N, Ci, H, W]`, `w`: `[Ci, Co, kh, kw]`.
/// `g` describes the *output* image (`Co` channels) as seen by the adjoint
/// convolution, so `g.out_height() == H`.
pub fn conv_transpose2d<T: Scalar>(x: &[T], n: usize, ci: usize, g: &ConvGeom, w: &[T]) -> Vec<T> {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let out_len = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut y = vec![T::zero(); n * out_len];
    for s in 0..n {
        gemm(
            rows,
            ci,
            cols_n,
            w,
            true,
            &x[s * ci * cols_n..(s + 1) * ci * cols_n],
            false,
            T::zero(),
            &mut cols,
        );
        col2im(&cols, g, &mut y[s * out_len..(s + 1) * out_len]);
    }
    y
}

#[allow(clippy::too_many_arguments)]
pub fn conv_transpose2d_backward<T: Scalar>(
    x: &[T],
    n: usize,
    ci: usize,
    g: &ConvGeom,
    w: &[T],
    dy: &[T],
    need_dx: bool,
    need_dw: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (rows, cols_n) = (g.col_rows(), g.col_cols());
    let out_len = g.channels * g.height * g.width;
    let mut cols = vec![T::zero(); rows * cols_n];
    let mut dx = need_dx.then(|| vec![T::zero(); n * ci * cols_n]);
    let mut dw = need_dw.then(|| vec![T::zero(); ci * rows]);
    for s in 0..n {
        im2col(&dy[s * out_len..(s + 1) * out_len], g, &mut cols);
        if let Some(dx) = dx.as_mut() {
            gemm(
                ci,
                rows,
                cols_n,
                w,
                false,
                &cols,
                false,
                T::zero(),
                &mut dx[s * ci * cols_n..(s + 1) * ci * cols_n],
            );
        }
        if let Some(dw) = dw.as_mut() {
            gemm(
                ci,
                cols_n,
                rows,
                &x[s * ci * cols_n..(s + 1) * ci * cols_n],
                false,
                &cols,
                true,
                T::one(),
                dw,
            );
        }
    }
    (dx, dw)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_handles_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0f64, 2.0, 3.0, 4.0];
        let b = [5.0f64, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        gemm(2, 2, 2, &a, false, &b, false, 0.0, &mut c);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, 0.0, &mut c);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 5,
            width: 4,
            kh: 3,
            kw: 2,
            stride: 2,
            pad: 1,
        };
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let c: Vec<f64> = (0..g.col_rows() * g.col_cols())
            .map(|i| (i as f64 * 0.11).cos())
            .collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&x, &g, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im(&c, &g, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
