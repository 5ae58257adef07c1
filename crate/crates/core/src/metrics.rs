//! PSNR and SSIM on the luma channel.

use crate::error::{Error, Result};
use crate::image::Image;

/// Returned by [`psnr_y`] for identical inputs.
pub const PSNR_IDENTICAL: f64 = f64::INFINITY;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;
const PEAK: f64 = 255.0;

/// Studio-swing BT.601 luma in `[16, 235]`. Inputs are clipped to `[0, 1]` first.
pub fn rgb_to_y(img: &Image) -> Result<Vec<f64>> {
    if img.channels() != 3 {
        return Err(Error::Dimension {
            op: "rgb_to_y",
            msg: format!("expected an RGB image, got {} channels", img.channels()),
        });
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    Ok(r.iter()
        .zip(g)
        .zip(b)
        .map(|((&r, &g), &b)| {
            let (r, g, b) = (r.clamp(0.0, 1.0), g.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
            16.0 + 65.481 * r + 128.553 * g + 24.966 * b
        })
        .collect())
}

fn check_pair(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if (a.channels(), a.height(), a.width()) != (b.channels(), b.height(), b.width()) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![a.channels(), a.height(), a.width()],
            rhs: vec![b.channels(), b.height(), b.width()],
        });
    }
    Ok(())
}

/// PSNR between two luma planes of size `height`×`width` after removing
/// `border` pixels on every side.
pub fn psnr_plane(a: &[f64], b: &[f64], height: usize, width: usize, border: usize) -> Result<f64> {
    if a.len() != height * width || b.len() != height * width {
        return Err(Error::ShapeMismatch {
            op: "psnr",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if 2 * border >= height || 2 * border >= width {
        return Err(Error::Dimension {
            op: "psnr",
            msg: format!("border {border} leaves nothing of a {height}×{width} image"),
        });
    }
    let mut sse = 0.0;
    let mut count = 0usize;
    for y in border..height - border {
        for x in border..width - border {
            let d = a[y * width + x] - b[y * width + x];
            sse += d * d;
            count += 1;
        }
    }
    if sse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    let mse = sse / count as f64;
    Ok(10.0 * (PEAK * PEAK / mse).log10())
}

/// Y-channel PSNR in dB with a `border`-pixel crop.
pub fn psnr_y(a: &Image, b: &Image, border: usize) -> Result<f64> {
    check_pair("psnr_y", a, b)?;
    psnr_plane(&rgb_to_y(a)?, &rgb_to_y(b)?, a.height(), a.width(), border)
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Separable "valid" filtering with the SSIM window.
fn filter_valid(src: &[f64], height: usize, width: usize, win: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let oh = height + 1 - SSIM_WINDOW;
    let ow = width + 1 - SSIM_WINDOW;
    let mut tmp = vec![0.0; height * ow];
    for y in 0..height {
        for x in 0..ow {
            tmp[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * src[y * width + x + k]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..SSIM_WINDOW).map(|k| win[k] * tmp[(y + k) * ow + x]).sum();
        }
    }
    out
}

/// Mean SSIM between two luma planes on the 0–255 scale.
pub fn ssim_plane(a: &[f64], b: &[f64], height: usize, width: usize) -> Result<f64> {
    if a.len() != height * width || b.len() != height * width {
        return Err(Error::ShapeMismatch {
            op: "ssim",
            lhs: vec![a.len()],
            rhs: vec![b.len()],
        });
    }
    if height < SSIM_WINDOW || width < SSIM_WINDOW {
        return Err(Error::Dimension {
            op: "ssim",
            msg: format!("image must be at least {SSIM_WINDOW}×{SSIM_WINDOW}, got {height}×{width}"),
        });
    }
    let win = gaussian_window();
    let c1 = (SSIM_K1 * PEAK).powi(2);
    let c2 = (SSIM_K2 * PEAK).powi(2);
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> { a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect() };
    let mu_a = filter_valid(a, height, width, &win);
    let mu_b = filter_valid(b, height, width, &win);
    let aa = filter_valid(&prod(&|x, _| x * x), height, width, &win);
    let bb = filter_valid(&prod(&|_, y| y * y), height, width, &win);
    let ab = filter_valid(&prod(&|x, y| x * y), height, width, &win);
    let n = mu_a.len() as f64;
    let total: f64 = (0..mu_a.len())
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2))
        })
        .sum();
    Ok(total / n)
}

/// Y-channel SSIM (11×11 Gaussian window, σ = 1.5, K1 = 0.01, K2 = 0.03).
pub fn ssim_y(a: &Image, b: &Image) -> Result<f64> {
    check_pair("ssim_y", a, b)?;
    ssim_plane(&rgb_to_y(a)?, &rgb_to_y(b)?, a.height(), a.width())
}
