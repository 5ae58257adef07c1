use crate::error::{Error, Result};
use crate::tensor::Array;

/// Planar (channel-major) image with `f64` samples, nominally in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::Dimension {
                op: "image",
                msg: format!(
                    "{channels}×{height}×{width} image needs {} samples, got {}",
                    channels * height * width,
                    data.len()
                ),
            });
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Self {
        Image {
            channels,
            height,
            width,
            data: vec![value; channels * height * width],
        }
    }

    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Image {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f64) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Image {
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn clipped(&self) -> Image {
        self.map(|v| v.clamp(0.0, 1.0))
    }

    pub fn crop(&self, top: usize, left: usize, height: usize, width: usize) -> Result<Image> {
        if top + height > self.height || left + width > self.width {
            return Err(Error::Dimension {
                op: "crop",
                msg: format!(
                    "{height}×{width} crop at ({top}, {left}) exceeds {}×{} image",
                    self.height, self.width
                ),
            });
        }
        Ok(Image::from_fn(self.channels, height, width, |c, y, x| {
            self.get(c, top + y, left + x)
        }))
    }

    /// View as a single-item NCHW batch.
    pub fn to_array(&self) -> Array {
        Array::from_parts(vec![1, self.channels, self.height, self.width], self.data.clone())
    }

    /// Inverse of [`Image::to_array`]; the batch must hold exactly one item.
    pub fn from_array(a: &Array) -> Result<Image> {
        match *a.shape() {
            [1, c, h, w] => Image::new(c, h, w, a.data().to_vec()),
            ref s => Err(Error::Dimension {
                op: "image from tensor",
                msg: format!("expected a 1×C×H×W tensor, got {s:?}"),
            }),
        }
    }

    /// Stack equally sized images into an N×C×H×W batch.
    pub fn batch(images: &[Image]) -> Result<Array> {
        let first = images.first().ok_or(Error::Empty("image batch"))?;
        let mut data = Vec::with_capacity(first.data.len() * images.len());
        for img in images {
            if (img.channels, img.height, img.width) != (first.channels, first.height, first.width) {
                return Err(Error::ShapeMismatch {
                    op: "image batch",
                    lhs: vec![first.channels, first.height, first.width],
                    rhs: vec![img.channels, img.height, img.width],
                });
            }
            data.extend_from_slice(&img.data);
        }
        Ok(Array::from_parts(
            vec![images.len(), first.channels, first.height, first.width],
            data,
        ))
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }
}
