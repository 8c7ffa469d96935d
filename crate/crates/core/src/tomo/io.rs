//! Raw array files and 8-bit exports.
//!
//! Raw layout: the magic `RCK1`, then little-endian `u32` rows, `u32` cols
//! and a `u32` dtype tag (1 = `f32`), followed by `rows * cols` little-endian
//! `f32` values in row-major order.

use std::fs;
use std::path::Path;

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{GrayImage, Luma, Rgb, RgbImage};

use super::{HuMap, Image, Sinogram};
use crate::error::{Error, Result};

pub const RAW_MAGIC: &[u8; 4] = b"RCK1";
pub const DTYPE_F32: u32 = 1;

/// A decoded raw array.
#[derive(Clone, Debug, PartialEq)]
pub struct RawArray {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f32>,
}

pub fn encode_raw(rows: usize, cols: usize, values: &[f32]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(16 + 4 * values.len());
    buf.extend_from_slice(RAW_MAGIC);
    buf.extend_from_slice(&(rows as u32).to_le_bytes());
    buf.extend_from_slice(&(cols as u32).to_le_bytes());
    buf.extend_from_slice(&DTYPE_F32.to_le_bytes());
    for v in values {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf
}

pub fn decode_raw(bytes: &[u8], path: &Path) -> Result<RawArray> {
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.to_string() };
    if bytes.len() < 16 || &bytes[..4] != RAW_MAGIC {
        return Err(bad("missing RCK1 header"));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap());
    let (rows, cols, tag) = (word(4) as usize, word(8) as usize, word(12));
    if tag != DTYPE_F32 {
        return Err(bad(&format!("unsupported dtype tag {tag}")));
    }
    if bytes.len() != 16 + 4 * rows * cols {
        return Err(bad(&format!("payload length {} does not match {rows}x{cols}", bytes.len() - 16)));
    }
    let values = bytes[16..].chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
    Ok(RawArray { rows, cols, values })
}

pub fn read_raw(path: &Path) -> Result<RawArray> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_raw(&bytes, path)
}

pub fn write_image_raw(img: &Image, path: &Path) -> Result<()> {
    fs::write(path, encode_raw(img.height(), img.width(), img.values())).map_err(|e| Error::io(path, e))
}

/// Reads a raw image and attaches `hu_map`.
pub fn read_image_raw(path: &Path, hu_map: Option<HuMap>) -> Result<Image> {
    let raw = read_raw(path)?;
    Ok(Image::new(raw.cols, raw.rows, raw.values)?.with_hu_map(hu_map))
}

pub fn write_sinogram_raw(sino: &Sinogram, path: &Path) -> Result<()> {
    fs::write(path, encode_raw(sino.n_angles(), sino.n_detectors(), sino.values())).map_err(|e| Error::io(path, e))
}

/// Reads a raw sinogram. The file carries no angle list, so rows are taken
/// to be the evenly spaced subset of an `n_full`-angle scan.
pub fn read_sinogram_raw(path: &Path, n_full: usize) -> Result<Sinogram> {
    let raw = read_raw(path)?;
    let indices = super::subsample_indices(n_full, raw.rows)?;
    Sinogram::new(raw.cols, raw.values, indices)
}

/// Display window in Hounsfield Units.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DisplayWindow {
    pub low_hu: f64,
    pub high_hu: f64,
}

impl Default for DisplayWindow {
    fn default() -> Self {
        DisplayWindow { low_hu: -1000.0, high_hu: 2000.0 }
    }
}

pub fn to_gray(img: &Image, window: DisplayWindow) -> GrayImage {
    let map = img.hu_map().unwrap_or_default();
    let span = (window.high_hu - window.low_hu).max(f64::EPSILON);
    let mut out = GrayImage::new(img.width() as u32, img.height() as u32);
    for (i, &v) in img.values().iter().enumerate() {
        let hu = match img.unit() {
            super::Unit::Normalized => map.to_hu(f64::from(v)),
            super::Unit::Hounsfield => f64::from(v),
        };
        let level = ((hu - window.low_hu) / span).clamp(0.0, 1.0);
        let (x, y) = ((i % img.width()) as u32, (i / img.width()) as u32);
        out.put_pixel(x, y, Luma([(level * 255.0).round() as u8]));
    }
    out
}

/// Writes an 8-bit PGM (`.pgm`) or PNG (any other extension).
pub fn export_image(img: &Image, window: DisplayWindow, path: &Path) -> Result<()> {
    let gray = to_gray(img, window);
    if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("pgm")) {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let encoder =
            PnmEncoder::new(std::io::BufWriter::new(file)).with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary));
        gray.write_with_encoder(encoder)?;
    } else {
        gray.save(path)?;
    }
    Ok(())
}

/// Absolute HU error mapped onto a black-to-red ramp saturating at `scale_hu`.
pub fn export_error_map(recon: &Image, reference: &Image, scale_hu: f64, path: &Path) -> Result<()> {
    recon.check_shape(reference, "error map")?;
    let a = recon.to_hu()?;
    let b = reference.to_hu()?;
    let mut out = RgbImage::new(recon.width() as u32, recon.height() as u32);
    for (i, (&x, &y)) in a.values().iter().zip(b.values()).enumerate() {
        let level = (f64::from((x - y).abs()) / scale_hu).clamp(0.0, 1.0);
        let red = (level * 255.0).round() as u8;
        let (px, py) = ((i % recon.width()) as u32, (i / recon.width()) as u32);
        out.put_pixel(px, py, Rgb([red, 0, 0]));
    }
    out.save(path)?;
    Ok(())
}
