//! Checkpoint files and 8-bit PNG images.
//!
//! Checkpoint layout, all integers little-endian:
//!
//! ```text
//! "MZSR"  u16 version
//! u32 depth  u32 features  u32 kernel_size  u32 channels
//! u32 tensor count, then per tensor: u32 rank, rank × u32 dims
//! f32 payload in tensor order
//! u32 CRC32 of every preceding byte
//! ```

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::image::Image;
use crate::network::{ArchDescriptor, ModelParams};
use crate::tensor::Array;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MZSR";
pub const CHECKPOINT_VERSION: u16 = 1;

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Corrupt(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

/// Serialize parameters to the checkpoint byte layout.
pub fn encode_checkpoint(params: &ModelParams) -> Result<Vec<u8>> {
    let arch = params.arch();
    let mut buf = Vec::with_capacity(64 + 4 * params.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    for v in [arch.depth, arch.features, arch.kernel_size, arch.channels] {
        put_u32(&mut buf, v)?;
    }
    put_u32(&mut buf, params.tensors().len())?;
    for t in params.tensors() {
        put_u32(&mut buf, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut buf, d)?;
        }
    }
    for t in params.tensors() {
        for &v in t.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    Ok(buf)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt("unexpected end of checkpoint".into()))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }
}

/// Parse and validate checkpoint bytes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(Error::BadMagic);
    }
    if bytes.len() < 6 {
        return Err(Error::Corrupt("checkpoint header is truncated".into()));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    if bytes.len() < 10 {
        return Err(Error::Corrupt("checkpoint is truncated".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Crc { stored, computed });
    }

    let mut r = Reader { bytes: body, pos: 6 };
    let arch = ArchDescriptor {
        depth: r.u32()?,
        features: r.u32()?,
        kernel_size: r.u32()?,
        channels: r.u32()?,
    };
    arch.validate()?;
    let count = r.u32()?;
    if count != 2 * arch.depth {
        return Err(Error::Alignment {
            expected: 2 * arch.depth,
            got: count,
        });
    }
    let mut shapes = Vec::with_capacity(count);
    for _ in 0..count {
        let rank = r.u32()?;
        if rank > 4 {
            return Err(Error::Corrupt(format!("tensor rank {rank} is too large")));
        }
        shapes.push((0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?);
    }
    let total: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if body.len() - r.pos != 4 * total {
        return Err(Error::Corrupt(format!(
            "payload holds {} bytes but the shapes need {}",
            body.len() - r.pos,
            4 * total
        )));
    }
    let mut tensors = Vec::with_capacity(count);
    for shape in shapes {
        let n = shape.iter().product::<usize>();
        let data = r
            .take(4 * n)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        tensors.push(Array::new(shape, data)?);
    }
    ModelParams::from_tensors(arch, tensors)
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<()> {
    let bytes = encode_checkpoint(params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// Read an 8-bit PNG as RGB in `[0, 1]`. Gray is replicated, alpha dropped.
pub fn read_png(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info()?;
    let (color, depth) = reader.output_color_type();
    if depth != png::BitDepth::Eight {
        return Err(Error::UnsupportedImage(format!(
            "{}: unsupported bit depth {depth:?}, only 8-bit PNG is accepted",
            path.display()
        )));
    }
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::UnsupportedImage(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let (h, w) = (info.height as usize, info.width as usize);
    let stride = color.samples();
    let bytes = &buf[..info.buffer_size()];
    let rgb = |c: usize| -> usize {
        match color {
            png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha => 0,
            _ => c,
        }
    };
    if !matches!(
        color,
        png::ColorType::Grayscale | png::ColorType::GrayscaleAlpha | png::ColorType::Rgb | png::ColorType::Rgba
    ) {
        return Err(Error::UnsupportedImage(format!(
            "{}: unsupported color type {color:?}",
            path.display()
        )));
    }
    Ok(Image::from_fn(3, h, w, |c, y, x| {
        bytes[(y * w + x) * stride + rgb(c)] as f64 / 255.0
    }))
}

/// Write an RGB image as an 8-bit PNG, clipping to `[0, 1]`.
pub fn write_png(img: &Image, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::UnsupportedImage(format!(
            "can only write RGB images, got {} channels",
            img.channels()
        )));
    }
    let (h, w) = (img.height(), img.width());
    let mut bytes = Vec::with_capacity(3 * h * w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                bytes.push((img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            }
        }
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut encoder = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder.write_header()?;
    writer.write_image_data(&bytes)?;
    writer.finish()?;
    Ok(())
}

/// Write `header` and `rows` as CSV.
pub fn write_csv(path: &Path, header: &str, rows: &[String]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(out, "{header}")?;
        for row in rows {
            writeln!(out, "{row}")?;
        }
        out.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}
