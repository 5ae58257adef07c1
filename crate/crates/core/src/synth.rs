//! Procedural RGB images for desk-scale training and evaluation.
//!
//! Scenes mix smooth gradients, hard-edged shapes and oriented gratings so
//! that super-resolution has real edges and textures to recover.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::image::Image;

fn random_color<R: Rng + ?Sized>(rng: &mut R) -> [f64; 3] {
    [rng.random(), rng.random(), rng.random()]
}

fn blend(img: &mut Image, y: usize, x: usize, color: [f64; 3], alpha: f64) {
    for (c, &v) in color.iter().enumerate() {
        let old = img.get(c, y, x);
        img.set(c, y, x, old * (1.0 - alpha) + v * alpha);
    }
}

/// One random scene of size `height`×`width`.
pub fn scene<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Image {
    compose(rng, height, width, 4)
}

/// Piecewise-smooth scene: gradient background with rectangles and ellipses
/// only. Its step edges look alike at every scale.
pub fn edge_scene<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize) -> Image {
    compose(rng, height, width, 2)
}

/// `kinds` selects how many of rectangle, ellipse, grating, line may appear.
fn compose<R: Rng + ?Sized>(rng: &mut R, height: usize, width: usize, kinds: u32) -> Image {
    let (h, w) = (height as f64, width as f64);
    let c0 = random_color(rng);
    let c1 = random_color(rng);
    let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let (dy, dx) = angle.sin_cos();
    let mut img = Image::from_fn(3, height, width, |c, y, x| {
        let t = ((x as f64 / w - 0.5) * dx + (y as f64 / h - 0.5) * dy + 0.5).clamp(0.0, 1.0);
        c0[c] * (1.0 - t) + c1[c] * t
    });

    let shapes = rng.random_range(4..10);
    for _ in 0..shapes {
        let color = random_color(rng);
        let alpha = rng.random_range(0.6..=1.0);
        match rng.random_range(0..kinds) {
            0 => {
                // axis-aligned rectangle
                let y0 = rng.random_range(0.0..h);
                let x0 = rng.random_range(0.0..w);
                let rh = rng.random_range(3.0..(h / 2.0).max(3.5));
                let rw = rng.random_range(3.0..(w / 2.0).max(3.5));
                for y in 0..height {
                    for x in 0..width {
                        let (fy, fx) = (y as f64, x as f64);
                        if fy >= y0 && fy < y0 + rh && fx >= x0 && fx < x0 + rw {
                            blend(&mut img, y, x, color, alpha);
                        }
                    }
                }
            }
            1 => {
                // rotated ellipse
                let cy = rng.random_range(0.0..h);
                let cx = rng.random_range(0.0..w);
                let ra = rng.random_range(2.0..(h / 3.0).max(2.5));
                let rb = rng.random_range(2.0..(w / 3.0).max(2.5));
                let (s, c) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
                for y in 0..height {
                    for x in 0..width {
                        let (py, px) = (y as f64 - cy, x as f64 - cx);
                        let u = c * px + s * py;
                        let v = -s * px + c * py;
                        if (u / ra).powi(2) + (v / rb).powi(2) <= 1.0 {
                            blend(&mut img, y, x, color, alpha);
                        }
                    }
                }
            }
            2 => {
                // oriented square-wave grating inside a disc
                let cy = rng.random_range(0.0..h);
                let cx = rng.random_range(0.0..w);
                let r = rng.random_range(6.0..(h.min(w) / 2.0).max(6.5));
                let period = rng.random_range(3.0..10.0);
                let (s, c) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
                for y in 0..height {
                    for x in 0..width {
                        let (py, px) = (y as f64 - cy, x as f64 - cx);
                        if px * px + py * py <= r * r && ((c * px + s * py) / period).rem_euclid(1.0) < 0.5 {
                            blend(&mut img, y, x, color, alpha);
                        }
                    }
                }
            }
            _ => {
                // thin line
                let y0 = rng.random_range(0.0..h);
                let x0 = rng.random_range(0.0..w);
                let (s, c) = rng.random_range(0.0..std::f64::consts::PI).sin_cos();
                let half = rng.random_range(0.5..2.0);
                for y in 0..height {
                    for x in 0..width {
                        let d = (-s * (x as f64 - x0) + c * (y as f64 - y0)).abs();
                        if d <= half {
                            blend(&mut img, y, x, color, alpha);
                        }
                    }
                }
            }
        }
    }
    img.clipped()
}

/// `count` scenes, deterministic per seed.
pub fn corpus(seed: u64, count: usize, height: usize, width: usize) -> Vec<Image> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| scene(&mut rng, height, width)).collect()
}

/// A random `tile`×`tile` [`edge_scene`] repeated across the canvas.
pub fn tiled_texture(seed: u64, height: usize, width: usize, tile: usize) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = edge_scene(&mut rng, tile, tile);
    Image::from_fn(3, height, width, |c, y, x| cell.get(c, y % tile, x % tile))
}
