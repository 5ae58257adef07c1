//! Residual plain-conv super-resolution network.
//!
//! The network sees the bicubic-upscaled low-resolution image and predicts a
//! residual: `f(x) = x + body(x)`, where `body` is a stack of `depth`
//! same-padded convolutions with ReLU between them (none after the last).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::{conv2d, Array, Graph, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ArchDescriptor {
    /// Total number of conv layers.
    pub depth: usize,
    /// Hidden channel count.
    pub features: usize,
    /// Spatial kernel side (odd).
    pub kernel_size: usize,
    /// Input and output channels.
    pub channels: usize,
}

impl Default for ArchDescriptor {
    /// 8 layers, 64 features, 3×3: 225,091 parameters.
    fn default() -> Self {
        ArchDescriptor {
            depth: 8,
            features: 64,
            kernel_size: 3,
            channels: 3,
        }
    }
}

impl ArchDescriptor {
    pub fn new(depth: usize, features: usize) -> Self {
        ArchDescriptor {
            depth,
            features,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Arch(format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.features == 0 {
            return Err(Error::Arch("features must be positive".into()));
        }
        if self.channels == 0 {
            return Err(Error::Arch("channels must be positive".into()));
        }
        if self.kernel_size == 0 || self.kernel_size.is_multiple_of(2) {
            return Err(Error::Arch(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        Ok(())
    }

    pub fn padding(&self) -> usize {
        self.kernel_size / 2
    }

    /// `(out, in)` channel pairs per layer.
    pub fn layer_channels(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|l| {
                let inp = if l == 0 { self.channels } else { self.features };
                let out = if l + 1 == self.depth {
                    self.channels
                } else {
                    self.features
                };
                (out, inp)
            })
            .collect()
    }

    pub fn weight_shape(&self, layer: usize) -> [usize; 4] {
        let (o, i) = self.layer_channels()[layer];
        [o, i, self.kernel_size, self.kernel_size]
    }

    pub fn param_count(&self) -> Result<usize> {
        self.validate()?;
        let k2 = self.kernel_size * self.kernel_size;
        Ok(self.layer_channels().into_iter().map(|(o, i)| o * i * k2 + o).sum())
    }
}

/// Network parameters as plain values, stored `[w0, b0, w1, b1, ...]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    arch: ArchDescriptor,
    tensors: Vec<Array>,
}

impl ModelParams {
    /// He-normal weights and zero biases, deterministic per seed.
    pub fn build(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = Vec::with_capacity(2 * arch.depth);
        for layer in 0..arch.depth {
            let shape = arch.weight_shape(layer);
            let fan_in = (shape[1] * shape[2] * shape[3]) as f64;
            let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("finite std");
            let len = shape.iter().product();
            let data = (0..len).map(|_| normal.sample(&mut rng)).collect();
            tensors.push(Array::from_parts(shape.to_vec(), data));
            tensors.push(Array::zeros(&[shape[0]]));
        }
        Ok(ModelParams { arch, tensors })
    }

    /// Parameters with every weight and bias equal to zero.
    pub fn zeros(arch: ArchDescriptor) -> Result<Self> {
        arch.validate()?;
        let tensors = (0..arch.depth)
            .flat_map(|l| {
                let shape = arch.weight_shape(l);
                [Array::zeros(&shape), Array::zeros(&[shape[0]])]
            })
            .collect();
        Ok(ModelParams { arch, tensors })
    }

    /// Reassemble from a flat `[w0, b0, ...]` list, checking every shape.
    pub fn from_tensors(arch: ArchDescriptor, tensors: Vec<Array>) -> Result<Self> {
        arch.validate()?;
        if tensors.len() != 2 * arch.depth {
            return Err(Error::Alignment {
                expected: 2 * arch.depth,
                got: tensors.len(),
            });
        }
        for layer in 0..arch.depth {
            let w = arch.weight_shape(layer);
            for (t, expected) in [(&tensors[2 * layer], w.to_vec()), (&tensors[2 * layer + 1], vec![w[0]])] {
                if t.shape() != expected.as_slice() {
                    return Err(Error::ShapeMismatch {
                        op: "model params",
                        lhs: expected,
                        rhs: t.shape().to_vec(),
                    });
                }
            }
        }
        Ok(ModelParams { arch, tensors })
    }

    pub fn arch(&self) -> ArchDescriptor {
        self.arch
    }

    pub fn tensors(&self) -> &[Array] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Array] {
        &mut self.tensors
    }

    pub fn into_tensors(self) -> Vec<Array> {
        self.tensors
    }

    pub fn param_count(&self) -> usize {
        self.tensors.iter().map(Array::len).sum()
    }

    /// Record the parameters on `graph` as differentiable leaves.
    pub fn attach(&self, graph: &Graph) -> Vec<Tensor> {
        self.tensors.iter().map(|t| graph.leaf(t.clone())).collect()
    }

    /// Gradient-free forward pass on an NCHW batch.
    pub fn forward(&self, x: &Array) -> Result<Array> {
        let graph = Graph::new();
        let params: Vec<Tensor> = self.tensors.iter().map(|t| graph.constant(t.clone())).collect();
        let input = graph.constant(x.clone());
        let out = forward(self.arch, &params, &input)?;
        let value = out.value();
        Ok((*value).clone())
    }
}

/// Differentiable forward pass: `x + body(x)`.
pub fn forward(arch: ArchDescriptor, params: &[Tensor], x: &Tensor) -> Result<Tensor> {
    if params.len() != 2 * arch.depth {
        return Err(Error::Alignment {
            expected: 2 * arch.depth,
            got: params.len(),
        });
    }
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != arch.channels {
        return Err(Error::Dimension {
            op: "network forward",
            msg: format!("expected N×{}×H×W input, got {shape:?}", arch.channels),
        });
    }
    let pad = arch.padding();
    let mut h = x.clone();
    for layer in 0..arch.depth {
        h = conv2d(&h, &params[2 * layer], &params[2 * layer + 1], pad)?;
        if layer + 1 < arch.depth {
            h = h.relu();
        }
    }
    x.add(&h)
}
