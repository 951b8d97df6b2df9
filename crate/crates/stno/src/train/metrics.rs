//! PSNR, SSIM, and flow end-point error.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// PSNR cap used instead of infinity for identical images.
pub const PSNR_CAP: f64 = 99.0;

/// 10·log10(1/MSE) for values in [0,1]; identical inputs report the cap.
pub fn psnr(a: &Tensor<f32>, b: &Tensor<f32>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let mse: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.numel() as f64;
    if mse <= 0.0 {
        return PSNR_CAP;
    }
    (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn gaussian_window() -> [f64; SSIM_WINDOW * SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW * SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for y in 0..SSIM_WINDOW {
        for x in 0..SSIM_WINDOW {
            let d2 = (y as f64 - c).powi(2) + (x as f64 - c).powi(2);
            let v = (-d2 / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
            w[y * SSIM_WINDOW + x] = v;
            sum += v;
        }
    }
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Rec. 601 luma of an RGB [3,H,W] tensor.
pub fn luma(img: &Tensor<f32>) -> Vec<f64> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let d = img.data();
    (0..h * w)
        .map(|p| {
            0.299 * d[p] as f64 + 0.587 * d[h * w + p] as f64 + 0.114 * d[2 * h * w + p] as f64
        })
        .collect()
}

/// Mean local SSIM over valid 11×11 Gaussian windows of the luma channels.
pub fn ssim(a: &Tensor<f32>, b: &Tensor<f32>) -> Result<f64> {
    if a.shape() != b.shape() {
        return Err(Error::dim(format!("ssim: {:?} vs {:?}", a.shape(), b.shape())));
    }
    let (h, w) = (a.shape()[1], a.shape()[2]);
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::contract(format!(
            "ssim: image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
        )));
    }
    let la = luma(a);
    let lb = luma(b);
    let win = gaussian_window();
    let c1 = (SSIM_K1 * 1.0f64).powi(2);
    let c2 = (SSIM_K2 * 1.0f64).powi(2);
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let mut mu_a = 0.0;
            let mut mu_b = 0.0;
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let k = win[wy * SSIM_WINDOW + wx];
                    mu_a += k * la[(oy + wy) * w + ox + wx];
                    mu_b += k * lb[(oy + wy) * w + ox + wx];
                }
            }
            let mut var_a = 0.0;
            let mut var_b = 0.0;
            let mut cov = 0.0;
            for wy in 0..SSIM_WINDOW {
                for wx in 0..SSIM_WINDOW {
                    let k = win[wy * SSIM_WINDOW + wx];
                    let da = la[(oy + wy) * w + ox + wx] - mu_a;
                    let db = lb[(oy + wy) * w + ox + wx] - mu_b;
                    var_a += k * da * da;
                    var_b += k * db * db;
                    cov += k * da * db;
                }
            }
            total += ((2.0 * mu_a * mu_b + c1) * (2.0 * cov + c2))
                / ((mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Mean end-point error in pixels over pixels where `valid` is positive.
/// Returns None when no pixel is valid.
pub fn epe(flow: &Tensor<f32>, gt: &Tensor<f32>, valid: Option<&Tensor<f32>>) -> Option<f64> {
    assert_eq!(flow.shape(), gt.shape());
    let (h, w) = (flow.shape()[1], flow.shape()[2]);
    let n = h * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for p in 0..n {
        if let Some(m) = valid {
            if m.data()[p] <= 0.0 {
                continue;
            }
        }
        let dx = (flow.data()[p] - gt.data()[p]) as f64;
        let dy = (flow.data()[n + p] - gt.data()[n + p]) as f64;
        total += (dx * dx + dy * dy).sqrt();
        count += 1;
    }
    if count == 0 {
        None
    } else {
        Some(total / count as f64)
    }
}
