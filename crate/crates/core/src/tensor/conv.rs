//! Raw stride-1 convolution kernels (im2col + GEMM).
//!
//! The three routines are mutual adjoints: `input_grad` is the adjoint of
//! `forward` in its input argument and `weight_grad` the adjoint in its
//! weight argument. The graph layer relies on that closure to differentiate
//! each of them again.

use super::Array;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug)]
struct Geometry {
    batch: usize,
    in_ch: usize,
    height: usize,
    width: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn in_plane(&self) -> usize {
        self.height * self.width
    }
}

fn dims4(op: &'static str, shape: &[usize]) -> Result<[usize; 4]> {
    match *shape {
        [a, b, c, d] => Ok([a, b, c, d]),
        _ => Err(Error::Dimension {
            op,
            msg: format!("expected a rank-4 tensor, got shape {shape:?}"),
        }),
    }
}

fn out_extent(op: &'static str, extent: usize, k: usize, pad: usize) -> Result<usize> {
    if extent + 2 * pad < k {
        return Err(Error::Dimension {
            op,
            msg: format!("kernel extent {k} exceeds padded input extent {}", extent + 2 * pad),
        });
    }
    Ok(extent + 2 * pad + 1 - k)
}

fn geometry(x: &[usize], w: &[usize], pad: usize) -> Result<Geometry> {
    let [batch, in_ch, height, width] = dims4("conv2d", x)?;
    let [out_ch, w_in, kh, kw] = dims4("conv2d", w)?;
    if w_in != in_ch {
        return Err(Error::Dimension {
            op: "conv2d",
            msg: format!("input has {in_ch} channels but weight expects {w_in}"),
        });
    }
    Ok(Geometry {
        batch,
        in_ch,
        height,
        width,
        out_ch,
        kh,
        kw,
        pad,
        out_h: out_extent("conv2d", height, kh, pad)?,
        out_w: out_extent("conv2d", width, kw, pad)?,
    })
}

fn im2col(img: &[f64], g: &Geometry, col: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let src = &img[c * g.in_plane()..(c + 1) * g.in_plane()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * plane;
                let dst = &mut col[row..row + plane];
                for oy in 0..g.out_h {
                    let iy = (oy + i) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src_row = &src[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox + j) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.width as isize {
                            0.0
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], g: &Geometry, img: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.in_ch {
        let dst = &mut img[c * g.in_plane()..(c + 1) * g.in_plane()];
        for i in 0..g.kh {
            for j in 0..g.kw {
                let row = ((c * g.kh + i) * g.kw + j) * plane;
                let src = &col[row..row + plane];
                for oy in 0..g.out_h {
                    let iy = (oy + i) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst_row = &mut dst[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox + j) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.width as isize {
                            dst_row[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

/// `c = a · b` (or `c += a · b` when `accumulate`) with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n);
    debug_assert!(m == 0 || k == 0 || a.len() > (m - 1) * rsa + (k - 1) * csa);
    debug_assert!(k == 0 || n == 0 || b.len() > (k - 1) * rsb + (n - 1) * csb);
    let beta = if accumulate { 1.0 } else { 0.0 };
    // SAFETY: the slices cover every index addressed by the given extents and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Cross-correlation of `x` (N,C,H,W) with `w` (O,C,kh,kw), zero padding `pad`.
pub(crate) fn forward(x: &Array, w: &Array, pad: usize) -> Result<Array> {
    let g = geometry(x.shape(), w.shape(), pad)?;
    let plane = g.out_plane();
    let mut col = vec![0.0; g.patch_len() * plane];
    let mut out = vec![0.0; g.batch * g.out_ch * plane];
    let in_stride = g.in_ch * g.in_plane();
    for n in 0..g.batch {
        im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &g, &mut col);
        gemm(
            g.out_ch,
            g.patch_len(),
            plane,
            w.data(),
            (g.patch_len(), 1),
            &col,
            (plane, 1),
            &mut out[n * g.out_ch * plane..(n + 1) * g.out_ch * plane],
            false,
        );
    }
    Ok(Array::from_parts(vec![g.batch, g.out_ch, g.out_h, g.out_w], out))
}

/// Gradient of `<forward(x, w), gy>` with respect to `x`, for `x` of spatial size `height`×`width`.
pub(crate) fn input_grad(gy: &Array, w: &Array, pad: usize, height: usize, width: usize) -> Result<Array> {
    let [batch, out_ch, gh, gw] = dims4("conv2d input grad", gy.shape())?;
    let [w_out, in_ch, _, _] = dims4("conv2d input grad", w.shape())?;
    if w_out != out_ch {
        return Err(Error::Dimension {
            op: "conv2d input grad",
            msg: format!("gradient has {out_ch} channels but weight produces {w_out}"),
        });
    }
    let g = geometry(&[batch, in_ch, height, width], w.shape(), pad)?;
    if (g.out_h, g.out_w) != (gh, gw) {
        return Err(Error::Dimension {
            op: "conv2d input grad",
            msg: format!(
                "gradient spatial size {gh}x{gw} does not match output size {}x{}",
                g.out_h, g.out_w
            ),
        });
    }
    let plane = g.out_plane();
    let mut col = vec![0.0; g.patch_len() * plane];
    let in_stride = in_ch * g.in_plane();
    let mut out = vec![0.0; batch * in_stride];
    for n in 0..batch {
        gemm(
            g.patch_len(),
            out_ch,
            plane,
            w.data(),
            (1, g.patch_len()),
            &gy.data()[n * out_ch * plane..(n + 1) * out_ch * plane],
            (plane, 1),
            &mut col,
            false,
        );
        col2im(&col, &g, &mut out[n * in_stride..(n + 1) * in_stride]);
    }
    Ok(Array::from_parts(vec![batch, in_ch, height, width], out))
}

/// Gradient of `<forward(x, w), gy>` with respect to a `kh`×`kw` weight.
pub(crate) fn weight_grad(x: &Array, gy: &Array, pad: usize, kh: usize, kw: usize) -> Result<Array> {
    let [batch, in_ch, _, _] = dims4("conv2d weight grad", x.shape())?;
    let [gb, out_ch, gh, gw] = dims4("conv2d weight grad", gy.shape())?;
    let g = geometry(x.shape(), &[out_ch, in_ch, kh, kw], pad)?;
    if gb != batch || (g.out_h, g.out_w) != (gh, gw) {
        return Err(Error::ShapeMismatch {
            op: "conv2d weight grad",
            lhs: vec![batch, out_ch, g.out_h, g.out_w],
            rhs: gy.shape().to_vec(),
        });
    }
    let plane = g.out_plane();
    let mut col = vec![0.0; g.patch_len() * plane];
    let mut out = vec![0.0; out_ch * g.patch_len()];
    let in_stride = in_ch * g.in_plane();
    for n in 0..batch {
        im2col(&x.data()[n * in_stride..(n + 1) * in_stride], &g, &mut col);
        gemm(
            out_ch,
            plane,
            g.patch_len(),
            &gy.data()[n * out_ch * plane..(n + 1) * out_ch * plane],
            (plane, 1),
            &col,
            (1, plane),
            &mut out,
            n > 0,
        );
    }
    Ok(Array::from_parts(vec![out_ch, in_ch, kh, kw], out))
}
