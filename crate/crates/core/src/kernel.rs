//! Anisotropic Gaussian blur kernels.
//!
//! A kernel is parameterized by a rotation angle and the two eigenvalues of
//! its covariance, `Σ = R(θ) diag(λ1, λ2) R(θ)ᵀ`, and rasterized onto an odd
//! square grid normalized to unit sum.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};

/// Default raster side; covers three standard deviations of the widest kernel sampled at ×2.
pub const DEFAULT_KERNEL_SIZE: usize = 15;

/// Largest eigenvalue ratio accepted by [`KernelSpec::rasterize`].
const MAX_CONDITION: f64 = 1e12;

pub type Mat2 = [[f64; 2]; 2];

/// `R(θ) · diag(λ1, λ2) · R(θ)ᵀ`.
pub fn covariance(theta: f64, lambda1: f64, lambda2: f64) -> Result<Mat2> {
    if !(lambda1 > 0.0 && lambda2 > 0.0) {
        return Err(Error::Kernel(format!(
            "eigenvalues must be positive, got ({lambda1}, {lambda2})"
        )));
    }
    let (s, c) = theta.sin_cos();
    let off = (lambda1 - lambda2) * c * s;
    Ok([
        [lambda1 * c * c + lambda2 * s * s, off],
        [off, lambda1 * s * s + lambda2 * c * c],
    ])
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub theta: f64,
    pub lambda1: f64,
    pub lambda2: f64,
    pub size: usize,
}

impl KernelSpec {
    pub fn new(theta: f64, lambda1: f64, lambda2: f64, size: usize) -> Result<Self> {
        let spec = KernelSpec {
            theta,
            lambda1,
            lambda2,
            size,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn isotropic(lambda: f64) -> Result<Self> {
        Self::new(0.0, lambda, lambda, DEFAULT_KERNEL_SIZE)
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda1.is_nan() || self.lambda2.is_nan() || self.lambda2 <= 0.0 || self.lambda1 < self.lambda2 {
            return Err(Error::Kernel(format!(
                "need λ1 ≥ λ2 > 0, got λ1 = {}, λ2 = {}",
                self.lambda1, self.lambda2
            )));
        }
        if self.size < 3 || self.size.is_multiple_of(2) {
            return Err(Error::Kernel(format!(
                "size must be odd and at least 3, got {}",
                self.size
            )));
        }
        if !self.theta.is_finite() {
            return Err(Error::Kernel("angle must be finite".into()));
        }
        Ok(())
    }

    pub fn covariance(&self) -> Result<Mat2> {
        covariance(self.theta, self.lambda1, self.lambda2)
    }

    /// Sample the Gaussian density at every grid offset and normalize.
    pub fn rasterize(&self) -> Result<Kernel> {
        self.validate()?;
        if self.lambda1 / self.lambda2 > MAX_CONDITION {
            return Err(Error::Kernel(format!(
                "covariance is numerically singular (condition {:e})",
                self.lambda1 / self.lambda2
            )));
        }
        let [[a, b], [_, d]] = self.covariance()?;
        let det = a * d - b * b;
        let inv = [[d / det, -b / det], [-b / det, a / det]];
        let center = (self.size / 2) as f64;
        let mut weights = Vec::with_capacity(self.size * self.size);
        for row in 0..self.size {
            let dy = row as f64 - center;
            for col in 0..self.size {
                let dx = col as f64 - center;
                let q = inv[0][0] * dx * dx + 2.0 * inv[0][1] * dx * dy + inv[1][1] * dy * dy;
                weights.push((-0.5 * q).exp());
            }
        }
        let total: f64 = weights.iter().sum();
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Kernel {
            size: self.size,
            weights,
        })
    }
}

/// Draw `θ ~ U[0, π]`, `λ1 ~ U[1, 2.5 s]`, `λ2 ~ U[1, λ1]`.
pub fn sample_kernel_params<R: Rng + ?Sized>(scale: f64, rng: &mut R) -> KernelSpec {
    let scale = scale.max(1.0);
    let theta = rng.random_range(0.0..=std::f64::consts::PI);
    let lambda1 = rng.random_range(1.0..=2.5 * scale);
    let lambda2 = rng.random_range(1.0..=lambda1);
    KernelSpec {
        theta,
        lambda1,
        lambda2,
        size: DEFAULT_KERNEL_SIZE,
    }
}

/// Square blur filter with non-negative weights, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Kernel {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel {
    /// Wrap a raw grid, rejecting non-square, even-sided, negative or zero-sum input.
    /// The weights are renormalized to unit sum.
    pub fn from_grid(size: usize, mut weights: Vec<f64>) -> Result<Self> {
        if size == 0 || size.is_multiple_of(2) || weights.len() != size * size {
            return Err(Error::Kernel(format!(
                "kernel grid must be an odd square, got {} values for side {size}",
                weights.len()
            )));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Kernel("kernel weights must be finite and non-negative".into()));
        }
        let total: f64 = weights.iter().sum();
        if total <= 0.0 {
            return Err(Error::Kernel("kernel weights sum to zero".into()));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        Ok(Kernel { size, weights })
    }

    /// 1×1 identity filter.
    pub fn delta() -> Self {
        Kernel {
            size: 1,
            weights: vec![1.0],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.weights[row * self.size + col]
    }

    /// Plain-text grid: one row per line, space-separated.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for row in self.weights.chunks(self.size) {
            let line: Vec<String> = row.iter().map(|w| format!("{w:.12e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut rows = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let row = line
                .split_whitespace()
                .map(|v| {
                    v.parse::<f64>()
                        .map_err(|_| Error::Kernel(format!("bad kernel value `{v}`")))
                })
                .collect::<Result<Vec<_>>>()?;
            rows.push(row);
        }
        let size = rows.len();
        if rows.iter().any(|r| r.len() != size) {
            return Err(Error::Kernel("kernel file is not a square grid".into()));
        }
        Self::from_grid(size, rows.concat())
    }
}

/// How the blurred image is reduced by the scale factor.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SubsampleMode {
    /// Keep every `s`-th pixel starting at index 0.
    #[default]
    Direct,
    /// Antialiased bicubic shrink.
    Bicubic,
}

impl fmt::Display for SubsampleMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SubsampleMode::Direct => "direct",
            SubsampleMode::Bicubic => "bicubic",
        })
    }
}

impl FromStr for SubsampleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "direct" => Ok(SubsampleMode::Direct),
            "bicubic" => Ok(SubsampleMode::Bicubic),
            other => Err(Error::Config(format!(
                "unknown subsampling mode `{other}` (expected direct or bicubic)"
            ))),
        }
    }
}

/// Evaluation scenario: a kernel together with its subsampling mode.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NamedKernel {
    pub spec: KernelSpec,
    pub mode: SubsampleMode,
}

pub const NAMED_KERNELS: [&str; 4] = ["g_d_0.2", "g_d_2.0", "g_d_ani", "g_b_1.3"];

/// The fixed evaluation kernels. Widths are read as covariance eigenvalues.
pub fn named_kernel(name: &str) -> Result<NamedKernel> {
    let size = DEFAULT_KERNEL_SIZE;
    let (spec, mode) = match name {
        "g_d_0.2" => (KernelSpec::new(0.0, 0.2, 0.2, size)?, SubsampleMode::Direct),
        "g_d_2.0" => (KernelSpec::new(0.0, 2.0, 2.0, size)?, SubsampleMode::Direct),
        "g_d_ani" => (KernelSpec::new(-0.5, 4.0, 1.0, size)?, SubsampleMode::Direct),
        "g_b_1.3" => (KernelSpec::new(0.0, 1.3, 1.3, size)?, SubsampleMode::Bicubic),
        other => return Err(Error::UnknownKernel(other.to_string())),
    };
    Ok(NamedKernel { spec, mode })
}
