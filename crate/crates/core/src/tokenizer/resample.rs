//! Separable resampling matrices between square grids.
//!
//! A map of side `from` is resized to side `to` as `R X R^T`, where `R` is the
//! `to x from` matrix returned by [`resize_matrix`].

use swm_autograd::{gemm, Float, MatRef, Tensor};

/// Bilinear resampling matrix with half-pixel centres.
///
/// Upsampling interpolates between the two nearest source cells with edge
/// clamping. Downsampling widens the triangle kernel by the scale factor so
/// every source cell contributes (area-aware, no aliasing).
pub fn resize_matrix(from: usize, to: usize) -> Vec<f64> {
    assert!(from > 0 && to > 0, "resize between empty grids");
    let mut m = vec![0.0; to * from];
    if from == to {
        for i in 0..to {
            m[i * from + i] = 1.0;
        }
        return m;
    }
    let scale = from as f64 / to as f64;
    if to > from {
        for i in 0..to {
            let src = ((i as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(from - 1);
            let i1 = (i0 + 1).min(from - 1);
            let w1 = src - i0 as f64;
            m[i * from + i0] += 1.0 - w1;
            m[i * from + i1] += w1;
        }
    } else {
        for i in 0..to {
            let centre = (i as f64 + 0.5) * scale;
            let row = &mut m[i * from..(i + 1) * from];
            let mut total = 0.0;
            for (j, r) in row.iter_mut().enumerate() {
                let w = (1.0 - ((j as f64 + 0.5 - centre) / scale).abs()).max(0.0);
                *r = w;
                total += w;
            }
            row.iter_mut().for_each(|r| *r /= total);
        }
    }
    m
}

pub fn resize_tensor<F: Float>(from: usize, to: usize) -> Tensor<F> {
    Tensor::from_f64(&[to, from], &resize_matrix(from, to))
}

/// Resizes `planes` stacked `side x side` maps with `r` (`to x side`).
/// Uses the same operation order as the tape's resize op.
pub fn resize_planes<F: Float>(x: &[F], planes: usize, r: &Tensor<F>) -> Vec<F> {
    let (to, from) = r.dims2();
    assert_eq!(x.len(), planes * from * from, "plane size mismatch");
    let mut tmp = vec![F::zero(); to * from];
    let mut out = vec![F::zero(); planes * to * to];
    for p in 0..planes {
        gemm(
            MatRef::new(r.data(), to, from),
            MatRef::new(&x[p * from * from..(p + 1) * from * from], from, from),
            F::zero(),
            &mut tmp,
            from,
        );
        gemm(MatRef::new(&tmp, to, from), MatRef::new(r.data(), to, from).t(), F::zero(), &mut out[p * to * to..(p + 1) * to * to], to);
    }
    out
}
