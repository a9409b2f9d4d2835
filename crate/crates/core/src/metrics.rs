//! Image quality metrics on plain tensors.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Reported PSNR for identical images.
pub const PSNR_CAP_DB: f64 = 100.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;

fn check_pair(op: &'static str, a: &Tensor<f64>, b: &Tensor<f64>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::ShapeMismatch {
            op,
            lhs: a.shape(),
            rhs: b.shape(),
        });
    }
    Ok(())
}

pub fn mse(a: &Tensor<f64>, b: &Tensor<f64>) -> Result<f64> {
    check_pair("mse", a, b)?;
    let s: f64 = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok(s / a.numel().max(1) as f64)
}

/// `10·log10(range² / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(a: &Tensor<f64>, b: &Tensor<f64>, data_range: f64) -> Result<f64> {
    if data_range <= 0.0 {
        return Err(Error::invalid("psnr", "data range must be positive"));
    }
    let m = mse(a, b)?;
    if m == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (data_range * data_range / m).log10()).min(PSNR_CAP_DB))
}

/// Normalized 1D Gaussian taps.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let t: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = t.iter().sum();
    t.into_iter().map(|v| v / s).collect()
}

/// Valid-region separable filtering of an `(h, w)` plane.
fn filter(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h + 1 - k, w + 1 - k);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..k).map(|t| taps[t] * plane[y * w + x + t]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..k).map(|t| taps[t] * rows[(y + t) * ow + x]).sum();
        }
    }
    out
}

/// Mean local SSIM over all valid windows, averaged over every plane.
pub fn ssim(a: &Tensor<f64>, b: &Tensor<f64>, data_range: f64) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let [n, c, h, w] = a.shape().0;
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::invalid("ssim", format!("image {} smaller than {SSIM_WINDOW}x{SSIM_WINDOW} window", a.shape())));
    }
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01 * data_range).powi(2);
    let c2 = (0.03 * data_range).powi(2);
    let mut total = 0.0;
    for b_ in 0..n {
        for ch in 0..c {
            let (x, y) = (a.plane(b_, ch), b.plane(b_, ch));
            let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
            let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
            let xy: Vec<f64> = x.iter().zip(y).map(|(p, q)| p * q).collect();
            let (mx, my) = (filter(x, h, w, &taps), filter(y, h, w, &taps));
            let (sxx, syy, sxy) = (filter(&xx, h, w, &taps), filter(&yy, h, w, &taps), filter(&xy, h, w, &taps));
            let mut acc = 0.0;
            for i in 0..mx.len() {
                let (ux, uy) = (mx[i], my[i]);
                let vx = sxx[i] - ux * ux;
                let vy = syy[i] - uy * uy;
                let cov = sxy[i] - ux * uy;
                acc += ((2.0 * ux * uy + c1) * (2.0 * cov + c2)) / ((ux * ux + uy * uy + c1) * (vx + vy + c2));
            }
            total += acc / mx.len() as f64;
        }
    }
    Ok(total / (n * c) as f64)
}
