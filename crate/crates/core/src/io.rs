//! Tensor dumps (`SDTN`) and 8-bit RGB images (PNG, binary PPM).
//!
//! SDTN layout: `b"SDTN"`, version byte `0x01`, `u32` LE rank (always 4),
//! four `u32` LE dims, then `f32` LE data in NCHW order.

use std::fs;
use std::io::Write;
use std::path::Path;

use image::{GrayImage, ImageBuffer, Luma, Rgb, RgbImage};

use crate::error::{Result, SdanError};
use crate::tensor::{Real, Shape, Tensor};

const MAGIC: &[u8; 4] = b"SDTN";
const VERSION: u8 = 1;
const HEADER_LEN: usize = 4 + 1 + 4 + 16;

pub fn encode_sdtn<T: Real>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * t.shape().len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&4u32.to_le_bytes());
    for d in t.shape().dims() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    out
}

pub fn decode_sdtn(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |reason: &str| SdanError::decode(path, reason);
    if bytes.len() < HEADER_LEN {
        return Err(bad("truncated header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("missing SDTN magic"));
    }
    if bytes[4] != VERSION {
        return Err(bad(&format!("unsupported version {}", bytes[4])));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    if word(5) != 4 {
        return Err(bad(&format!("rank {} is not 4", word(5))));
    }
    let shape = Shape::new(word(9), word(13), word(17), word(21));
    let payload = &bytes[HEADER_LEN..];
    if payload.len() != 4 * shape.len() {
        return Err(bad(&format!(
            "expected {} data bytes for {shape}, found {}",
            4 * shape.len(),
            payload.len()
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::from_vec(shape, data)
}

pub fn write_sdtn<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, encode_sdtn(t)).map_err(|e| SdanError::io(path, e))
}

pub fn read_sdtn(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| SdanError::io(path, e))?;
    decode_sdtn(&bytes, path)
}

fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// The values an 8-bit write followed by a read would return.
pub fn quantize_8bit(t: &Tensor<f32>) -> Tensor<f32> {
    t.map(|v| f32::from(quantize(v)) / 255.0)
}

fn rgb_bytes(t: &Tensor<f32>) -> Result<(u32, u32, Vec<u8>)> {
    let s = t.shape();
    if s.n != 1 || s.c != 3 {
        return Err(SdanError::dim(format!("image tensors must be 1x3xHxW, got {s}")));
    }
    let mut bytes = Vec::with_capacity(3 * s.plane());
    for i in 0..s.plane() {
        for c in 0..3 {
            bytes.push(quantize(t.plane(0, c)[i]));
        }
    }
    Ok((s.w as u32, s.h as u32, bytes))
}

fn from_rgb_bytes(w: usize, h: usize, bytes: &[u8]) -> Tensor<f32> {
    Tensor::from_fn(Shape::new(1, 3, h, w), |_, c, y, x| {
        bytes[3 * (y * w + x) + c] as f32 / 255.0
    })
}

pub fn encode_ppm(t: &Tensor<f32>) -> Result<Vec<u8>> {
    let (w, h, pixels) = rgb_bytes(t)?;
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.extend_from_slice(&pixels);
    Ok(out)
}

/// Parse a binary PPM with maxval 255. Comments in the header are allowed.
pub fn decode_ppm(bytes: &[u8], path: &Path) -> Result<Tensor<f32>> {
    let bad = |reason: &str| SdanError::decode(path, reason);
    let mut pos = 0;
    let mut fields = Vec::with_capacity(4);
    while fields.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    if fields[0] != "P6" {
        return Err(bad("not a binary PPM (P6)"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad(&format!("bad header field '{s}'")));
    let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if max != 255 {
        return Err(bad(&format!("unsupported maxval {max}")));
    }
    // exactly one whitespace byte separates the header from the raster
    pos += 1;
    let need = 3 * w * h;
    if bytes.len() < pos + need {
        return Err(bad("truncated raster"));
    }
    Ok(from_rgb_bytes(w, h, &bytes[pos..pos + need]))
}

fn is_ppm(path: &Path) -> bool {
    matches!(
        path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase).as_deref(),
        Some("ppm")
    )
}

/// Read an RGB image as a `1x3xHxW` tensor in `[0, 1]`.
pub fn read_image(path: &Path) -> Result<Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| SdanError::io(path, e))?;
    if is_ppm(path) || bytes.starts_with(b"P6") {
        return decode_ppm(&bytes, path);
    }
    let img = image::load_from_memory(&bytes).map_err(|e| SdanError::decode(path, e.to_string()))?;
    let rgb = img.to_rgb8();
    Ok(from_rgb_bytes(rgb.width() as usize, rgb.height() as usize, rgb.as_raw()))
}

/// Write a `1x3xHxW` tensor, clamped to `[0, 1]`; format chosen by extension.
pub fn write_image(path: &Path, t: &Tensor<f32>) -> Result<()> {
    if is_ppm(path) {
        let bytes = encode_ppm(t)?;
        let mut f = fs::File::create(path).map_err(|e| SdanError::io(path, e))?;
        return f.write_all(&bytes).map_err(|e| SdanError::io(path, e));
    }
    let (w, h, pixels) = rgb_bytes(t)?;
    let img: RgbImage = ImageBuffer::<Rgb<u8>, _>::from_raw(w, h, pixels).expect("buffer size matches");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SdanError::decode(path, e.to_string()))
}

/// Write one `h x w` plane as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, plane: &[f32], h: usize, w: usize) -> Result<()> {
    if plane.len() != h * w {
        return Err(SdanError::dim(format!("plane of {} values is not {h}x{w}", plane.len())));
    }
    let img: GrayImage = ImageBuffer::<Luma<u8>, _>::from_raw(w as u32, h as u32, plane.iter().map(|&v| quantize(v)).collect())
        .expect("buffer size matches");
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| SdanError::decode(path, e.to_string()))
}
