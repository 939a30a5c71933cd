//! Image files: 8-bit sRGB PNG for color, 8-bit grey PNG for masks and
//! little-endian PFM for lossless float color.
//!
//! In memory, color images are row-major `height x width x 3` linear RGB in
//! `[0, 1]` and masks are row-major `height x width`.

use std::fs;
use std::io::Cursor;
use std::path::Path;

use image::{GrayImage, ImageFormat, RgbImage};

use crate::blob::write_atomic;
use crate::Real;

#[derive(Debug, thiserror::Error)]
pub enum ImageIoError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {source}")]
    Codec { path: String, source: image::ImageError },
    #[error("{path}: {msg}")]
    Format { path: String, msg: String },
    #[error("buffer holds {got} values, expected {want} for {width}x{height}")]
    Size { got: usize, want: usize, width: usize, height: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> ImageIoError + '_ {
    move |source| ImageIoError::Io { path: path.display().to_string(), source }
}

fn check_size(data: &[Real], width: usize, height: usize, channels: usize) -> Result<(), ImageIoError> {
    let want = width * height * channels;
    if data.len() != want {
        return Err(ImageIoError::Size { got: data.len(), want, width, height });
    }
    Ok(())
}

pub fn linear_to_srgb(v: Real) -> Real {
    let v = v.clamp(0.0, 1.0);
    if v <= 0.003_130_8 {
        12.92 * v
    } else {
        1.055 * v.powf(1.0 / 2.4) - 0.055
    }
}

pub fn srgb_to_linear(v: Real) -> Real {
    if v <= 0.040_45 {
        v / 12.92
    } else {
        ((v + 0.055) / 1.055).powf(2.4)
    }
}

fn to_byte(v: Real) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn encode_png(write: impl FnOnce(&mut Cursor<Vec<u8>>) -> image::ImageResult<()>, path: &Path) -> Result<(), ImageIoError> {
    let mut buf = Cursor::new(Vec::new());
    write(&mut buf).map_err(|source| ImageIoError::Codec { path: path.display().to_string(), source })?;
    write_atomic(path, buf.get_ref()).map_err(io_err(path))
}

/// Writes linear RGB as an sRGB-encoded 8-bit PNG.
pub fn write_png(path: &Path, image: &[Real], width: usize, height: usize) -> Result<(), ImageIoError> {
    check_size(image, width, height, 3)?;
    let bytes: Vec<u8> = image.iter().map(|&v| to_byte(linear_to_srgb(v))).collect();
    let img = RgbImage::from_raw(width as u32, height as u32, bytes).expect("size checked");
    encode_png(|b| img.write_to(b, ImageFormat::Png), path)
}

/// Reads an 8-bit sRGB PNG into linear RGB.
pub fn read_png(path: &Path) -> Result<(Vec<Real>, usize, usize), ImageIoError> {
    let img = image::open(path)
        .map_err(|source| ImageIoError::Codec { path: path.display().to_string(), source })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data = img.into_raw().into_iter().map(|b| srgb_to_linear(b as Real / 255.0)).collect();
    Ok((data, w, h))
}

/// Writes a `[0, 1]` map as an 8-bit grey PNG without gamma.
pub fn write_mask_png(path: &Path, mask: &[Real], width: usize, height: usize) -> Result<(), ImageIoError> {
    check_size(mask, width, height, 1)?;
    let bytes: Vec<u8> = mask.iter().map(|&v| to_byte(v)).collect();
    let img = GrayImage::from_raw(width as u32, height as u32, bytes).expect("size checked");
    encode_png(|b| img.write_to(b, ImageFormat::Png), path)
}

pub fn read_mask_png(path: &Path) -> Result<(Vec<Real>, usize, usize), ImageIoError> {
    let img = image::open(path)
        .map_err(|source| ImageIoError::Codec { path: path.display().to_string(), source })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw().into_iter().map(|b| b as Real / 255.0).collect(), w, h))
}

/// Writes a 3-channel little-endian PFM. PFM stores rows bottom to top.
pub fn write_pfm(path: &Path, image: &[Real], width: usize, height: usize) -> Result<(), ImageIoError> {
    check_size(image, width, height, 3)?;
    let mut bytes = format!("PF\n{width} {height}\n-1.0\n").into_bytes();
    for row in (0..height).rev() {
        for &v in &image[row * width * 3..(row + 1) * width * 3] {
            bytes.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    write_atomic(path, &bytes).map_err(io_err(path))
}

pub fn read_pfm(path: &Path) -> Result<(Vec<Real>, usize, usize), ImageIoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let bad = |msg: &str| ImageIoError::Format { path: path.display().to_string(), msg: msg.into() };
    // Three whitespace-terminated header tokens, then raw floats.
    let mut tokens = Vec::new();
    let mut pos = 0;
    while tokens.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        tokens.push(std::str::from_utf8(&bytes[start..pos]).map_err(|_| bad("header is not ASCII"))?.to_string());
    }
    pos += 1;
    if tokens[0] != "PF" {
        return Err(bad("only 3-channel PF files are supported"));
    }
    let width: usize = tokens[1].parse().map_err(|_| bad("bad width"))?;
    let height: usize = tokens[2].parse().map_err(|_| bad("bad height"))?;
    let scale: f64 = tokens[3].parse().map_err(|_| bad("bad scale"))?;
    let little = scale < 0.0;
    let n = width * height * 3;
    let body = bytes.get(pos..).ok_or_else(|| bad("missing pixel data"))?;
    if body.len() != n * 4 {
        return Err(bad(&format!("expected {} data bytes, found {}", n * 4, body.len())));
    }
    let mut out = vec![0.0; n];
    for (i, c) in body.chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        let (row, rest) = (i / (width * 3), i % (width * 3));
        out[(height - 1 - row) * width * 3 + rest] = v as Real;
    }
    Ok((out, width, height))
}
