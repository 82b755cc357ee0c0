//! Forward kernels shared by the tape and by cache-based inference.
//!
//! Every kernel here is row-local: the value computed for one row depends
//! only on that row's inputs and the shared weights, never on how many other
//! rows are processed in the same call. Incremental decoding relies on this
//! to reproduce full-sequence values bit for bit.

use crate::float::{gemm, Float, MatRef};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

pub fn gelu<F: Float>(x: F) -> F {
    let c = F::lit(SQRT_2_OVER_PI);
    let inner = c * (x + F::lit(GELU_C) * x * x * x);
    F::lit(0.5) * x * (F::one() + inner.tanh())
}

pub fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::lit(SQRT_2_OVER_PI);
    let inner = c * (x + F::lit(GELU_C) * x * x * x);
    let t = inner.tanh();
    let dinner = c * (F::one() + F::lit(3.0 * GELU_C) * x * x);
    F::lit(0.5) * (F::one() + t) + F::lit(0.5) * x * (F::one() - t * t) * dinner
}

pub fn sigmoid<F: Float>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

pub fn silu<F: Float>(x: F) -> F {
    x * sigmoid(x)
}

pub fn silu_grad<F: Float>(x: F) -> F {
    let s = sigmoid(x);
    s * (F::one() + x * (F::one() - s))
}

/// `out[n x (hi-lo)] = x[n x k] @ w[k x ld][:, lo..hi] (+ bias[lo..hi])`.
#[allow(clippy::too_many_arguments)]
pub fn linear_forward<F: Float>(
    x: &[F],
    n: usize,
    k: usize,
    w: &[F],
    ld: usize,
    lo: usize,
    hi: usize,
    bias: Option<&[F]>,
    out: &mut [F],
) {
    let m = hi - lo;
    assert_eq!(out.len(), n * m);
    let wv = MatRef::strided(&w[lo..], k, m, ld);
    gemm(MatRef::new(x, n, k), wv, F::zero(), out, m);
    if let Some(b) = bias {
        let b = &b[lo..hi];
        for row in out.chunks_exact_mut(m) {
            for (o, &bb) in row.iter_mut().zip(b) {
                *o += bb;
            }
        }
    }
}

/// Row-wise layer normalization. Returns per-row (mean, rstd).
pub fn layer_norm_forward<F: Float>(
    x: &[F],
    cols: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
    out: &mut [F],
) -> (Vec<F>, Vec<F>) {
    let rows = x.len() / cols;
    let mut means = Vec::with_capacity(rows);
    let mut rstds = Vec::with_capacity(rows);
    let inv_n = F::one() / F::lit(cols as f64);
    for (xr, or) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        let mut mean = F::zero();
        for &v in xr {
            mean += v;
        }
        mean *= inv_n;
        let mut var = F::zero();
        for &v in xr {
            let d = v - mean;
            var += d * d;
        }
        var *= inv_n;
        let rstd = F::one() / (var + eps).sqrt();
        for i in 0..cols {
            or[i] = (xr[i] - mean) * rstd * gamma[i] + beta[i];
        }
        means.push(mean);
        rstds.push(rstd);
    }
    (means, rstds)
}

/// Group normalization over `(n, c, h, w)`. Returns per-(image, group) (mean, rstd).
#[allow(clippy::too_many_arguments)]
pub fn group_norm_forward<F: Float>(
    x: &[F],
    n: usize,
    c: usize,
    hw: usize,
    groups: usize,
    gamma: &[F],
    beta: &[F],
    eps: F,
    out: &mut [F],
) -> (Vec<F>, Vec<F>) {
    assert_eq!(c % groups, 0, "channels {c} not divisible by groups {groups}");
    let cg = c / groups;
    let count = F::lit((cg * hw) as f64);
    let mut means = Vec::with_capacity(n * groups);
    let mut rstds = Vec::with_capacity(n * groups);
    for img in 0..n {
        for g in 0..groups {
            let start = (img * c + g * cg) * hw;
            let seg = &x[start..start + cg * hw];
            let mut mean = F::zero();
            for &v in seg {
                mean += v;
            }
            mean = mean / count;
            let mut var = F::zero();
            for &v in seg {
                let d = v - mean;
                var += d * d;
            }
            var = var / count;
            let rstd = F::one() / (var + eps).sqrt();
            for ci in 0..cg {
                let ch = g * cg + ci;
                let off = start + ci * hw;
                for p in 0..hw {
                    out[off + p] = (x[off + p] - mean) * rstd * gamma[ch] + beta[ch];
                }
            }
            means.push(mean);
            rstds.push(rstd);
        }
    }
    (means, rstds)
}

/// Key/value storage for one attention head.
///
/// Keys are stored transposed (`head_dim x stride`) so that scoring one query
/// against a prefix of keys vectorizes across keys.
#[derive(Clone, Copy)]
pub struct HeadKv<'a, F> {
    pub kt: &'a [F],
    pub kt_stride: usize,
    pub v: &'a [F],
    pub v_stride: usize,
    pub v_offset: usize,
}

/// Attends one query (one head) over keys `0..limit`. Writes the head output
/// into `out` and the attention probabilities into `probs[..limit]`.
pub fn attend_one<F: Float>(q: &[F], kv: HeadKv<'_, F>, limit: usize, scale: F, probs: &mut [F], out: &mut [F]) {
    let hd = q.len();
    let s = &mut probs[..limit];
    s.iter_mut().for_each(|v| *v = F::zero());
    for d in 0..hd {
        let qd = q[d];
        let krow = &kv.kt[d * kv.kt_stride..d * kv.kt_stride + limit];
        for (sj, &kj) in s.iter_mut().zip(krow) {
            *sj += qd * kj;
        }
    }
    let mut max = F::neg_infinity();
    for sj in s.iter_mut() {
        *sj *= scale;
        if *sj > max {
            max = *sj;
        }
    }
    let mut sum = F::zero();
    for sj in s.iter_mut() {
        *sj = (*sj - max).exp();
        sum += *sj;
    }
    let inv = F::one() / sum;
    for sj in s.iter_mut() {
        *sj *= inv;
    }
    mix_values(s, kv, out);
}

/// `out = sum_j p[j] * v[j]` over the head's value rows.
pub fn mix_values<F: Float>(p: &[F], kv: HeadKv<'_, F>, out: &mut [F]) {
    let hd = out.len();
    out.iter_mut().for_each(|v| *v = F::zero());
    for (j, &pj) in p.iter().enumerate() {
        let base = j * kv.v_stride + kv.v_offset;
        let vrow = &kv.v[base..base + hd];
        for (o, &vv) in out.iter_mut().zip(vrow) {
            *o += pj * vv;
        }
    }
}

/// Transposes the head slice of `k` (`rows x width`, head columns
/// `h*hd..(h+1)*hd`) into `dst` (`hd x rows`).
pub fn transpose_head<F: Float>(k: &[F], rows: usize, width: usize, h: usize, hd: usize, dst: &mut [F]) {
    for r in 0..rows {
        let src = &k[r * width + h * hd..r * width + (h + 1) * hd];
        for d in 0..hd {
            dst[d * rows + r] = src[d];
        }
    }
}

pub fn conv_out_size(input: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - kernel) / stride + 1
}

/// Unfolds one `(c, h, w)` image into a `(c*k*k) x (ho*wo)` column matrix.
#[allow(clippy::too_many_arguments)]
pub fn im2col<F: Float>(img: &[F], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, col: &mut [F]) {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        dst[oy * wo + ox] = if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < w {
                            img[(ci * h + iy as usize) * w + ix as usize]
                        } else {
                            F::zero()
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates columns back into an image gradient.
#[allow(clippy::too_many_arguments)]
pub fn col2im<F: Float>(col: &[F], c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, img: &mut [F]) {
    let ho = conv_out_size(h, k, stride, pad);
    let wo = conv_out_size(w, k, stride, pad);
    let plane = ho * wo;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy as usize >= h {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && (ix as usize) < w {
                            img[(ci * h + iy as usize) * w + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}
