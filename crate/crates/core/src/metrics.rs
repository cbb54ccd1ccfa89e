//! Image quality metrics on `[0, 1]` RGB images.

use crate::data::ImageTensor;
use crate::error::{FurnError, Result};

pub const PSNR_CAP: f64 = 100.0;
const MSE_FLOOR: f64 = 1e-10;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn same_shape(a: &ImageTensor, b: &ImageTensor) -> Result<()> {
    if a.height() != b.height() || a.width() != b.width() {
        return Err(FurnError::ShapeMismatch(format!(
            "{}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB, capped at 100 dB for (near-)identical
/// images.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, max_val: f64) -> Result<f64> {
    same_shape(a, b)?;
    let n = a.data().len() as f64;
    let mse = a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n;
    if mse < MSE_FLOOR {
        return Ok(PSNR_CAP);
    }
    Ok(10.0 * (max_val * max_val / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let g: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| (-((i as f64 - r).powi(2)) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp())
        .collect();
    let s: f64 = g.iter().sum();
    g.iter().map(|v| v / s).collect()
}

fn grayscale(img: &ImageTensor) -> Vec<f64> {
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    r.iter().zip(g).zip(b).map(|((r, g), b)| (r + g + b) / 3.0).collect()
}

/// Mean SSIM over all fully contained 11×11 Gaussian windows of the
/// channel-mean grayscale images (dynamic range 1).
pub fn ssim(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = (a.height(), a.width());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(FurnError::TooSmall {
            height: h,
            width: w,
            window: SSIM_WINDOW,
        });
    }
    let (x, y) = (grayscale(a), grayscale(b));
    let g = gaussian_window();
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let mut total = 0.0;
    let mut count = 0usize;
    for oy in 0..=h - SSIM_WINDOW {
        for ox in 0..=w - SSIM_WINDOW {
            let (mut mx, mut my) = (0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wt = g[i] * g[j];
                    let k = (oy + i) * w + ox + j;
                    mx += wt * x[k];
                    my += wt * y[k];
                }
            }
            let (mut vx, mut vy, mut cxy) = (0.0, 0.0, 0.0);
            for i in 0..SSIM_WINDOW {
                for j in 0..SSIM_WINDOW {
                    let wt = g[i] * g[j];
                    let k = (oy + i) * w + ox + j;
                    let (dx, dy) = (x[k] - mx, y[k] - my);
                    vx += wt * dx * dx;
                    vy += wt * dy * dy;
                    cxy += wt * (dx * dy);
                }
            }
            total += ((2.0 * (mx * my) + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
            count += 1;
        }
    }
    Ok(total / count as f64)
}
