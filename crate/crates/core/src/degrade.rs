//! Synthetic degradation: blur, subsample, add noise.
//!
//! None of this is differentiated; it only produces training and test data.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::kernel::{Kernel, SubsampleMode};

#[derive(Clone, Debug, PartialEq)]
pub struct DegradeSpec {
    pub kernel: Kernel,
    pub scale: usize,
    pub mode: SubsampleMode,
    pub noise_sigma: f64,
}

impl DegradeSpec {
    pub fn new(kernel: Kernel, scale: usize, mode: SubsampleMode) -> Self {
        DegradeSpec {
            kernel,
            scale,
            mode,
            noise_sigma: 0.0,
        }
    }

    pub fn with_noise(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::Config("scale must be at least 1".into()));
        }
        if self.noise_sigma.is_nan() || self.noise_sigma < 0.0 {
            return Err(Error::Config(format!(
                "noise sigma must be non-negative, got {}",
                self.noise_sigma
            )));
        }
        Ok(())
    }
}

/// Mirror an index into `[0, n)` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m < n as isize {
        m as usize
    } else {
        (period - m) as usize
    }
}

/// Convolve every channel with `kernel`, reflective boundary.
pub fn blur(img: &Image, kernel: &Kernel) -> Image {
    let k = kernel.size();
    let r = (k / 2) as isize;
    let (h, w) = (img.height(), img.width());
    let mut out = Image::filled(img.channels(), h, w, 0.0);
    for c in 0..img.channels() {
        let src = img.plane(c);
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for i in 0..k {
                    let sy = reflect(y as isize + r - i as isize, h);
                    let row = &src[sy * w..(sy + 1) * w];
                    for j in 0..k {
                        let sx = reflect(x as isize + r - j as isize, w);
                        acc += kernel.at(i, j) * row[sx];
                    }
                }
                out.set(c, y, x, acc);
            }
        }
    }
    out
}

/// Keys cubic convolution kernel with `a = -0.5`.
pub(crate) fn cubic(x: f64) -> f64 {
    const A: f64 = -0.5;
    let t = x.abs();
    if t <= 1.0 {
        ((A + 2.0) * t - (A + 3.0)) * t * t + 1.0
    } else if t < 2.0 {
        ((A * t - 5.0 * A) * t + 8.0 * A) * t - 4.0 * A
    } else {
        0.0
    }
}

/// Source indices and normalized weights for every output sample along one axis.
fn contributions(in_len: usize, out_len: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = out_len as f64 / in_len as f64;
    // Widen the kernel when shrinking so it also acts as a lowpass filter.
    let kscale = scale.min(1.0);
    let support = 2.0 / kscale;
    (0..out_len)
        .map(|i| {
            let u = (i as f64 + 0.5) / scale - 0.5;
            let lo = (u - support).floor() as isize;
            let hi = (u + support).ceil() as isize;
            let mut taps: Vec<(usize, f64)> = (lo..=hi)
                .filter_map(|j| {
                    let wgt = kscale * cubic(kscale * (u - j as f64));
                    (wgt != 0.0).then(|| (reflect(j, in_len), wgt))
                })
                .collect();
            let total: f64 = taps.iter().map(|t| t.1).sum();
            taps.iter_mut().for_each(|t| t.1 /= total);
            taps
        })
        .collect()
}

/// Separable bicubic resampling to `out_h`×`out_w`, antialiased when shrinking.
pub fn bicubic_resize(img: &Image, out_h: usize, out_w: usize) -> Result<Image> {
    if out_h == 0 || out_w == 0 || img.height() == 0 || img.width() == 0 {
        return Err(Error::Dimension {
            op: "bicubic_resize",
            msg: format!("cannot resize {}×{} to {out_h}×{out_w}", img.height(), img.width()),
        });
    }
    if (out_h, out_w) == (img.height(), img.width()) {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let cols = contributions(w, out_w);
    let rows = contributions(h, out_h);
    let mut out = Image::filled(img.channels(), out_h, out_w, 0.0);
    let mut tmp = vec![0.0; h * out_w];
    for c in 0..img.channels() {
        let src = img.plane(c);
        for y in 0..h {
            let line = &src[y * w..(y + 1) * w];
            for (x, taps) in cols.iter().enumerate() {
                tmp[y * out_w + x] = taps.iter().map(|&(j, wt)| wt * line[j]).sum();
            }
        }
        for (y, taps) in rows.iter().enumerate() {
            for x in 0..out_w {
                let v = taps.iter().map(|&(j, wt)| wt * tmp[j * out_w + x]).sum();
                out.set(c, y, x, v);
            }
        }
    }
    Ok(out)
}

fn subsample_direct(img: &Image, s: usize) -> Image {
    Image::from_fn(img.channels(), img.height() / s, img.width() / s, |c, y, x| {
        img.get(c, y * s, x * s)
    })
}

/// `(hr ∗ k) ↓s + n`.
pub fn degrade<R: Rng + ?Sized>(hr: &Image, spec: &DegradeSpec, rng: &mut R) -> Result<Image> {
    let mut lr = degrade_noise_free(hr, spec)?;
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).expect("finite sigma");
        lr.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
    }
    Ok(lr)
}

/// `(hr ∗ k) ↓s`, ignoring `spec.noise_sigma`.
pub fn degrade_noise_free(hr: &Image, spec: &DegradeSpec) -> Result<Image> {
    spec.validate()?;
    let s = spec.scale;
    if !hr.height().is_multiple_of(s) || !hr.width().is_multiple_of(s) || hr.height() == 0 || hr.width() == 0 {
        return Err(Error::Dimension {
            op: "degrade",
            msg: format!("{}×{} image is not divisible by scale {s}", hr.height(), hr.width()),
        });
    }
    let blurred = blur(hr, &spec.kernel);
    match spec.mode {
        SubsampleMode::Direct => Ok(subsample_direct(&blurred, s)),
        SubsampleMode::Bicubic => bicubic_resize(&blurred, hr.height() / s, hr.width() / s),
    }
}

/// Degrade the test image once more with its own kernel (noise-free).
pub fn make_lr_son(lr: &Image, kernel: &Kernel, scale: usize, mode: SubsampleMode) -> Result<Image> {
    degrade_noise_free(lr, &DegradeSpec::new(kernel.clone(), scale, mode))
}
