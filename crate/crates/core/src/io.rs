//! Raw tensor files (GT1) and grayscale PNG images.
//!
//! GT1 layout: `GT1\0`, u32 LE rank, rank × u32 LE dims, then f32 LE data in
//! row-major order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const GT1_MAGIC: &[u8; 4] = b"GT1\0";

/// Appends the GT1 encoding of `t` (always rank 4) to `out`.
pub fn encode_gt1<S: Scalar>(t: &Tensor<S>, out: &mut Vec<u8>) {
    out.extend_from_slice(GT1_MAGIC);
    out.extend_from_slice(&4u32.to_le_bytes());
    for d in t.shape().0 {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.reserve(t.numel() * 4);
    for &v in t.data() {
        out.extend_from_slice(&(v.to_f64() as f32).to_le_bytes());
    }
}

/// Encoded size of a rank-4 tensor with `numel` entries.
pub fn gt1_len(numel: usize) -> usize {
    4 + 4 + 16 + 4 * numel
}

/// Decodes one GT1 tensor from the front of `bytes`; returns it with the
/// number of bytes consumed. Ranks below 4 are padded with leading ones.
pub fn decode_gt1(bytes: &[u8]) -> std::result::Result<(Tensor<f32>, usize), String> {
    let mut pos = 0usize;
    let mut take = |n: usize| -> std::result::Result<&[u8], String> {
        let s = bytes.get(pos..pos + n).ok_or_else(|| format!("truncated at byte {pos}"))?;
        pos += n;
        Ok(s)
    };
    if take(4)? != GT1_MAGIC {
        return Err("bad GT1 magic".into());
    }
    let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]) as usize;
    let rank = u32_at(take(4)?);
    if rank > 4 {
        return Err(format!("rank {rank} exceeds 4"));
    }
    let mut dims = [1usize; 4];
    for k in 0..rank {
        dims[4 - rank + k] = u32_at(take(4)?);
    }
    let numel = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or("dimension overflow")?;
    let raw = take(numel.checked_mul(4).ok_or("dimension overflow")?)?;
    let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    let t = Tensor::from_vec(Shape(dims), data).map_err(|e| e.to_string())?;
    Ok((t, pos))
}

pub fn write_gt1<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(gt1_len(t.numel()));
    encode_gt1(t, &mut buf);
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_gt1(path: impl AsRef<Path>) -> Result<Tensor<f32>> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let (t, used) = decode_gt1(&bytes).map_err(|m| Error::format(path, m))?;
    if used != bytes.len() {
        return Err(Error::format(path, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

#[derive(Clone, Copy, PartialEq, Eq, Debug)]
pub enum PngDepth {
    Eight,
    Sixteen,
}

/// Reads a grayscale PNG as `(1, 1, H, W)` with values in `[0, 1]`.
pub fn read_png(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut decoder = png::Decoder::new(BufReader::new(file));
    // Sub-byte grayscale widens to 8 bits; 16-bit samples stay 16-bit.
    decoder.set_transformations(png::Transformations::EXPAND);
    let mut reader = decoder.read_info().map_err(|e| Error::format(path, e.to_string()))?;
    let (color, _) = reader.output_color_type();
    if color != png::ColorType::Grayscale {
        return Err(Error::format(path, format!("expected grayscale, got {color:?}")));
    }
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).map_err(|e| Error::format(path, e.to_string()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let bytes = &buf[..info.buffer_size()];
    let data: Vec<f64> = match info.bit_depth {
        png::BitDepth::Sixteen => bytes
            .chunks_exact(2)
            .map(|c| u16::from_be_bytes([c[0], c[1]]) as f64 / 65535.0)
            .collect(),
        _ => bytes.iter().map(|&b| b as f64 / 255.0).collect(),
    };
    if data.len() != w * h {
        return Err(Error::format(path, "unexpected row padding"));
    }
    Tensor::from_vec([1, 1, h, w], data)
}

/// Writes the single plane of a `(1, 1, H, W)` tensor, clamped to `[0, 1]`.
pub fn write_png<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>, depth: PngDepth) -> Result<()> {
    let path = path.as_ref();
    let [n, c, h, w] = t.shape().0;
    if n != 1 || c != 1 {
        return Err(Error::invalid("write_png", format!("expected one grayscale plane, got {}", t.shape())));
    }
    let q = |v: S, max: f64| (v.to_f64().clamp(0.0, 1.0) * max).round();
    let (bit_depth, bytes): (png::BitDepth, Vec<u8>) = match depth {
        PngDepth::Eight => (png::BitDepth::Eight, t.data().iter().map(|&v| q(v, 255.0) as u8).collect()),
        PngDepth::Sixteen => (
            png::BitDepth::Sixteen,
            t.data().iter().flat_map(|&v| (q(v, 65535.0) as u16).to_be_bytes()).collect(),
        ),
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), w as u32, h as u32);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(bit_depth);
    let fmt = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(&bytes).map_err(fmt)?;
    writer.finish().map_err(fmt)?;
    Ok(())
}

/// Reads `.png` or `.gt1` by extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<Tensor<f64>> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => read_png(path),
        Some("gt1") => Ok(read_gt1(path)?.cast()),
        _ => Err(Error::format(path, "unsupported format (expected .png or .gt1)")),
    }
}

/// Writes `.png` (16-bit) or `.gt1` by extension.
pub fn write_image<S: Scalar>(path: impl AsRef<Path>, t: &Tensor<S>) -> Result<()> {
    let path = path.as_ref();
    match path.extension().and_then(|e| e.to_str()) {
        Some("png") => write_png(path, t, PngDepth::Sixteen),
        Some("gt1") => write_gt1(path, t),
        _ => Err(Error::format(path, "unsupported format (expected .png or .gt1)")),
    }
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut s = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut s))
        .map_err(|e| Error::io(path, e))?;
    Ok(s)
}
