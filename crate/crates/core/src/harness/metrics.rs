//! Image quality metrics.

use crate::error::{invalid, Result};
use crate::harness::io::Image;

/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn check(a: &Image, b: &Image) -> Result<()> {
    if !a.same_shape(b) {
        return Err(invalid(format!(
            "image shapes differ: {}x{}x{} vs {}x{}x{}",
            a.height, a.width, a.channels, b.height, b.width, b.channels
        )));
    }
    if a.data.is_empty() {
        return Err(invalid("empty images"));
    }
    Ok(())
}

pub fn mse(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    Ok(a.data.iter().zip(&b.data).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.data.len() as f64)
}

/// `10·log10(1 / mse)` for unit-range images, capped at [`PSNR_CAP`].
pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    Ok(psnr_from_mse(mse(a, b)?))
}

/// Normalised 1-D Gaussian taps.
pub fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let w: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Separable valid-mode filtering of one channel.
fn filter(plane: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let (oh, ow) = (h - n + 1, w - n + 1);
    let mut tmp = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            tmp[r * ow + c] = (0..n).map(|i| k[i] * plane[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * tmp[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean SSIM over valid window positions, averaged across channels. Images
/// smaller than the window use a window of the smaller side (odd-rounded).
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check(a, b)?;
    let (h, w, ch) = (a.height, a.width, a.channels);
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_window(size, SSIM_SIGMA);
    let (c1, c2) = ((SSIM_K1 * 1.0f64).powi(2), (SSIM_K2 * 1.0f64).powi(2));
    let mut total = 0.0;
    for c in 0..ch {
        let x: Vec<f64> = (0..h * w).map(|i| a.data[i * ch + c]).collect();
        let y: Vec<f64> = (0..h * w).map(|i| b.data[i * ch + c]).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(u, v)| u * v).collect::<Vec<f64>>();
        let mx = filter(&x, h, w, &k);
        let my = filter(&y, h, w, &k);
        let sxx = filter(&prod(&x, &x), h, w, &k);
        let syy = filter(&prod(&y, &y), h, w, &k);
        let sxy = filter(&prod(&x, &y), h, w, &k);
        let n = mx.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (vx, vy, cxy) = (sxx[i] - mx[i] * mx[i], syy[i] - my[i] * my[i], sxy[i] - mx[i] * my[i]);
            acc += ((2.0 * mx[i] * my[i] + c1) * (2.0 * cxy + c2))
                / ((mx[i] * mx[i] + my[i] * my[i] + c1) * (vx + vy + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / ch as f64)
}
