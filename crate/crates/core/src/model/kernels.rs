//! Forward kernels shared by the autodiff graph and the cached inference path.

use alloc::vec;
use alloc::vec::Vec;

use super::tensor::{gemm, Mat, Real, View, ViewMut};

pub const LN_EPS: f64 = 1e-5;
pub const BN_EPS: f64 = 1e-5;

/// `y = x * w^T + b` with `w` stored `[out, in]`.
pub fn linear<T: Real>(x: View<'_, T>, w: &[T], out_dim: usize, bias: Option<&[T]>) -> Mat<T> {
    let in_dim = x.cols;
    assert_eq!(w.len(), out_dim * in_dim, "linear weight shape");
    let mut y = Mat::zeros(x.rows, out_dim);
    let beta = if let Some(b) = bias {
        for r in 0..x.rows {
            y.row_mut(r).copy_from_slice(b);
        }
        T::one()
    } else {
        T::zero()
    };
    gemm(T::one(), x, View::new(w, out_dim, in_dim).t(), beta, y.view_mut());
    y
}

/// Normalizes each row; returns `(y, xhat, rstd)`.
pub fn layer_norm<T: Real>(x: &Mat<T>, gamma: &[T], beta: &[T]) -> (Mat<T>, Mat<T>, Vec<T>) {
    let n = T::from_f64(x.cols as f64);
    let eps = T::from_f64(LN_EPS);
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    let mut rstd = vec![T::zero(); x.rows];
    for r in 0..x.rows {
        let row = x.row(r);
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        let xr = xhat.row_mut(r);
        for (o, &v) in xr.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
        let yr = &mut y.data[r * x.cols..(r + 1) * x.cols];
        for c in 0..x.cols {
            yr[c] = xhat.data[r * x.cols + c] * gamma[c] + beta[c];
        }
    }
    (y, xhat, rstd)
}

/// Column statistics `(mean, biased variance)` over all rows.
pub fn column_stats<T: Real>(x: &Mat<T>) -> (Vec<T>, Vec<T>) {
    let n = T::from_f64(x.rows as f64);
    let mut mean = vec![T::zero(); x.cols];
    for r in 0..x.rows {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    let mut var = vec![T::zero(); x.cols];
    for r in 0..x.rows {
        for ((s, &v), &m) in var.iter_mut().zip(x.row(r)).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    for s in &mut var {
        *s /= n;
    }
    (mean, var)
}

/// Per-column affine normalization with the given statistics.
pub fn batch_norm_apply<T: Real>(x: &Mat<T>, mean: &[T], var: &[T], gamma: &[T], beta: &[T]) -> (Mat<T>, Mat<T>, Vec<T>) {
    let eps = T::from_f64(BN_EPS);
    let rstd: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
    let mut xhat = Mat::zeros(x.rows, x.cols);
    let mut y = Mat::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        for c in 0..x.cols {
            let i = r * x.cols + c;
            let h = (x.data[i] - mean[c]) * rstd[c];
            xhat.data[i] = h;
            y.data[i] = h * gamma[c] + beta[c];
        }
    }
    (y, xhat, rstd)
}

/// Convolution patch geometry over an NHWC activation stored `[n*h*w, c]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.pad - self.kernel) / self.stride + 1
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    /// Calls `f(out_row, patch_col, in_row)` for every in-bounds tap.
    pub fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (oh, ow, k) = (self.out_height(), self.out_width(), self.kernel);
        for n in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let orow = (n * oh + oy) * ow + ox;
                    for ky in 0..k {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..k {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let irow = (n * self.height + iy as usize) * self.width + ix as usize;
                            f(orow, ky * k + kx, irow);
                        }
                    }
                }
            }
        }
    }
}

/// Patch matrix `[n*oh*ow, c*k*k]`; column `ci*k*k + ky*k + kx`.
pub fn im2col<T: Real>(x: &Mat<T>, g: &ConvGeom) -> Mat<T> {
    let kk = g.kernel * g.kernel;
    let plen = g.patch_len();
    let mut out = Mat::zeros(g.batch * g.out_height() * g.out_width(), plen);
    g.for_each_tap(|orow, tap, irow| {
        let src = &x.data[irow * g.channels..(irow + 1) * g.channels];
        let dst = &mut out.data[orow * plen..(orow + 1) * plen];
        for (ci, &v) in src.iter().enumerate() {
            dst[ci * kk + tap] = v;
        }
    });
    out
}

pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// One attention problem inside a packed batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

impl Segment {
    /// Number of keys query `i` may see. Causal segments align the last query
    /// with the last key.
    pub fn visible(&self, i: usize, causal: bool) -> usize {
        if causal {
            (i + 1 + self.k_len - self.q_len).min(self.k_len)
        } else {
            self.k_len
        }
    }
}

/// Multi-head scaled dot-product attention over packed segments. Returns the
/// merged-head output and the probabilities laid out segment-major, then
/// head-major, each block `[q_len, k_len]` (masked entries are zero).
pub fn attention<T: Real>(
    q: &Mat<T>,
    k: &Mat<T>,
    v: &Mat<T>,
    segments: &[Segment],
    heads: usize,
    causal: bool,
) -> (Mat<T>, Vec<T>) {
    let d = q.cols;
    let dh = d / heads;
    let scale = T::one() / T::from_f64(dh as f64).sqrt();
    let mut out = Mat::zeros(q.rows, d);
    let total: usize = segments.iter().map(|s| s.q_len * s.k_len * heads).sum();
    let mut probs = vec![T::zero(); total];
    let mut off = 0;
    for s in segments {
        if causal {
            assert!(s.k_len >= s.q_len, "causal segment needs k_len >= q_len");
        }
        for h in 0..heads {
            let block = &mut probs[off..off + s.q_len * s.k_len];
            let qh = View::cols_block(&q.data, q.rows, d, h * dh, dh).rows_block(s.q_start, s.q_len);
            let kh = View::cols_block(&k.data, k.rows, d, h * dh, dh).rows_block(s.k_start, s.k_len);
            let vh = View::cols_block(&v.data, v.rows, d, h * dh, dh).rows_block(s.k_start, s.k_len);
            gemm(scale, qh, kh.t(), T::zero(), ViewMut::new(block, s.q_len, s.k_len));
            for i in 0..s.q_len {
                let row = &mut block[i * s.k_len..(i + 1) * s.k_len];
                let vis = s.visible(i, causal);
                softmax_in_place(&mut row[..vis]);
                for p in &mut row[vis..] {
                    *p = T::zero();
                }
            }
            let oh = ViewMut::cols_block(&mut out.data, q.rows, d, h * dh, dh).rows_block(s.q_start, s.q_len);
            gemm(T::one(), View::new(block, s.q_len, s.k_len), vh, T::zero(), oh);
            off += s.q_len * s.k_len;
        }
    }
    (out, probs)
}

/// Sinusoidal encoding of `pos` into `dim` values.
pub fn sinusoid<T: Real>(pos: usize, dim: usize, out: &mut [T]) {
    for i in 0..dim {
        let pair = (i / 2) as f64;
        let freq = libm::pow(10000.0, -2.0 * pair / dim as f64);
        let angle = pos as f64 * freq;
        out[i] = T::from_f64(if i % 2 == 0 { libm::sin(angle) } else { libm::cos(angle) });
    }
}

/// 1-D positional encodings for positions `0..len`.
pub fn positional_1d<T: Real>(len: usize, d: usize) -> Mat<T> {
    let mut m = Mat::zeros(len, d);
    for p in 0..len {
        sinusoid(p, d, m.row_mut(p));
    }
    m
}

/// 2-D encoding for an `h x w` grid: first half of the features encodes the
/// row, second half the column.
pub fn positional_2d<T: Real>(h: usize, w: usize, d: usize) -> Mat<T> {
    let dy = d / 2;
    let dx = d - dy;
    let mut m = Mat::zeros(h * w, d);
    for y in 0..h {
        for x in 0..w {
            let row = m.row_mut(y * w + x);
            sinusoid(y, dy, &mut row[..dy]);
            sinusoid(x, dx, &mut row[dy..]);
        }
    }
    m
}
