//! Frame-level image quality metrics on 8-bit frames.

use crate::error::{Error, Result};
use crate::image::Frame;

/// Value reported when two frames are identical.
pub const PSNR_CAP: f64 = 100.0;

fn same_size(a: &Frame, b: &Frame) -> Result<()> {
    if a.height != b.height || a.width != b.width {
        return Err(Error::invalid(format!("frame sizes differ: {}x{} vs {}x{}", a.height, a.width, b.height, b.width)));
    }
    Ok(())
}

/// Peak signal-to-noise ratio over all RGB samples with peak 255, capped at [`PSNR_CAP`].
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    same_size(a, b)?;
    let mse = a.data.iter().zip(&b.data).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum::<f64>() / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP))
}

const SSIM_WIN: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

fn gaussian_window() -> [f64; SSIM_WIN] {
    let mut w = [0.0; SSIM_WIN];
    let c = (SSIM_WIN / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        *v = (-((i as f64 - c).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-region filtering of an `h x w` image.
fn filter_valid(img: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| k[i] * img[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * rows[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Structural similarity on BT.601 luma with an 11-tap Gaussian window
/// (sigma 1.5), averaged over positions where the window fits entirely.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    same_size(a, b)?;
    let (h, w) = (a.height, a.width);
    if h < SSIM_WIN || w < SSIM_WIN {
        return Err(Error::invalid(format!("SSIM needs frames of at least {SSIM_WIN}x{SSIM_WIN}")));
    }
    let k = gaussian_window();
    let x = a.luma();
    let y = b.luma();
    let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
    let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
    let xy: Vec<f64> = x.iter().zip(&y).map(|(p, q)| p * q).collect();
    let mx = filter_valid(&x, h, w, &k);
    let my = filter_valid(&y, h, w, &k);
    let sxx = filter_valid(&xx, h, w, &k);
    let syy = filter_valid(&yy, h, w, &k);
    let sxy = filter_valid(&xy, h, w, &k);
    let c1 = (0.01f64 * 255.0).powi(2);
    let c2 = (0.03f64 * 255.0).powi(2);
    let mut total = 0.0;
    for i in 0..mx.len() {
        let (ux, uy) = (mx[i], my[i]);
        let vx = sxx[i] - ux * ux;
        let vy = syy[i] - uy * uy;
        let cov = sxy[i] - ux * uy;
        total += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
    }
    Ok(total / mx.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Psnr,
    Ssim,
}

impl Metric {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "psnr" => Ok(Metric::Psnr),
            "ssim" => Ok(Metric::Ssim),
            other => Err(Error::invalid(format!("unknown metric `{other}` (expected psnr or ssim)"))),
        }
    }

    /// Mean per-frame score of a predicted video against ground truth.
    pub fn video(self, pred: &[Frame], truth: &[Frame]) -> Result<f64> {
        if pred.len() != truth.len() || pred.is_empty() {
            return Err(Error::invalid(format!("{} predicted frames vs {} ground-truth frames", pred.len(), truth.len())));
        }
        let mut s = 0.0;
        for (p, t) in pred.iter().zip(truth) {
            s += match self {
                Metric::Psnr => psnr(p, t)?,
                Metric::Ssim => ssim(p, t)?,
            };
        }
        Ok(s / pred.len() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn psnr_of_uniform_offset() {
        let a = Frame::filled(8, 8, [100, 100, 100]);
        let b = Frame::filled(8, 8, [110, 110, 110]);
        let want = 10.0 * (255.0f64 * 255.0 / 100.0).log10();
        assert!((psnr(&a, &b).unwrap() - want).abs() < 1e-12);
        assert_eq!(psnr(&a, &a).unwrap(), PSNR_CAP);
    }

    #[test]
    fn ssim_identity_and_window() {
        let a = Frame::filled(16, 16, [30, 60, 90]);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);
        let w = gaussian_window();
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert!(ssim(&Frame::filled(8, 8, [0, 0, 0]), &Frame::filled(8, 8, [0, 0, 0])).is_err());
    }
}
