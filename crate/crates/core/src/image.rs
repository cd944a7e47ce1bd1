//! Raster images and the on-disk formats the difficulty estimator accepts.
//!
//! Supported inputs:
//!
//! - binary PGM (`P5`) and PPM (`P6`) with `maxval` 255, mapped to `[0,1]` by `/255`
//! - `DIMG` raw tensors: a 16-byte header (`b"DIMG"`, then little-endian `u32`
//!   width, height, channels) followed by `width * height * channels`
//!   little-endian `f32` values, row-major and channel-last

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

/// A decoded image with intensities in `[0,1]`, stored row-major with
/// interleaved channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ImagePlane {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f64>,
}

impl ImagePlane {
    pub fn new(width: usize, height: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::UnsupportedChannels(channels));
        }
        if width == 0 || height == 0 {
            return Err(Error::InvalidImage(format!(
                "zero-sized image {width}x{height}"
            )));
        }
        let expected = width * height * channels;
        if data.len() != expected {
            return Err(Error::DimensionMismatch {
                expected,
                actual: data.len(),
            });
        }
        if let Some(bad) = data.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidImage(format!(
                "intensity {bad} outside [0,1]"
            )));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    /// Image with every intensity set to `value`.
    pub fn constant(width: usize, height: usize, channels: usize, value: f64) -> Result<Self> {
        Self::new(width, height, channels, vec![value; width * height * channels])
    }

    /// Builds a grayscale image from a per-pixel function of `(x, y)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        mut f: impl FnMut(usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Self::new(width, height, 1, data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Intensity at `(x, y)` in channel `c`.
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    /// Intensity of a single-channel image with coordinates clamped to the
    /// image bounds (replicate padding).
    pub(crate) fn clamped(&self, x: isize, y: isize) -> f64 {
        let xc = x.clamp(0, self.width as isize - 1) as usize;
        let yc = y.clamp(0, self.height as isize - 1) as usize;
        self.data[yc * self.width + xc]
    }
}

/// Reads an image from disk, dispatching on the file magic.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImagePlane> {
    let path = path.as_ref();
    let bytes = fs::read(path)?;
    decode_image(&bytes).map_err(|e| match e {
        Error::InvalidImage(message) => Error::ImageDecode {
            path: path.to_path_buf(),
            message,
        },
        other => other,
    })
}

/// Decodes PGM/PPM/DIMG bytes.
pub fn decode_image(bytes: &[u8]) -> Result<ImagePlane> {
    match bytes.get(..2) {
        Some(b"P5") => decode_pnm(bytes, 1),
        Some(b"P6") => decode_pnm(bytes, 3),
        _ if bytes.starts_with(b"DIMG") => decode_dimg(bytes),
        _ => Err(Error::InvalidImage("unknown magic".into())),
    }
}

fn decode_pnm(bytes: &[u8], channels: usize) -> Result<ImagePlane> {
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        *field = pnm_header_number(bytes, &mut pos)?;
    }
    let [width, height, maxval] = fields;
    if maxval != 255 {
        return Err(Error::InvalidImage(format!(
            "unsupported maxval {maxval} (expected 255)"
        )));
    }
    // exactly one whitespace byte separates the header from the raster
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::InvalidImage("truncated pixel data".into())),
    }
    let needed = width * height * channels;
    let raster = &bytes[pos..];
    if raster.len() < needed {
        return Err(Error::InvalidImage("truncated pixel data".into()));
    }
    let data = raster[..needed].iter().map(|&b| f64::from(b) / 255.0).collect();
    ImagePlane::new(width, height, channels, data)
}

fn pnm_header_number(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    loop {
        match bytes.get(*pos) {
            Some(b'#') => {
                while let Some(&b) = bytes.get(*pos) {
                    *pos += 1;
                    if b == b'\n' {
                        break;
                    }
                }
            }
            Some(b) if b.is_ascii_whitespace() => *pos += 1,
            Some(_) => break,
            None => return Err(Error::InvalidImage("truncated header".into())),
        }
    }
    let start = *pos;
    while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
        *pos += 1;
    }
    std::str::from_utf8(&bytes[start..*pos])
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::InvalidImage("malformed header".into()))
}

fn decode_dimg(bytes: &[u8]) -> Result<ImagePlane> {
    if bytes.len() < 16 {
        return Err(Error::InvalidImage("truncated header".into()));
    }
    let word = |i: usize| u32::from_le_bytes(bytes[i..i + 4].try_into().unwrap()) as usize;
    let (width, height, channels) = (word(4), word(8), word(12));
    let needed = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| Error::InvalidImage("dimensions overflow".into()))?;
    let raster = &bytes[16..];
    if raster.len() < needed {
        return Err(Error::InvalidImage("truncated pixel data".into()));
    }
    let data = raster[..needed]
        .chunks_exact(4)
        .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
        .collect();
    ImagePlane::new(width, height, channels, data)
}

/// Encodes an image as `DIMG`.
pub fn encode_dimg(img: &ImagePlane) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + img.data.len() * 4);
    out.extend_from_slice(b"DIMG");
    for v in [img.width, img.height, img.channels] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &v in &img.data {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

/// Encodes an image as binary PGM (1 channel) or PPM (3 channels), quantized to 8 bits.
pub fn encode_pnm(img: &ImagePlane) -> Vec<u8> {
    let magic = if img.channels == 1 { "P5" } else { "P6" };
    let mut out = format!("{magic}\n{} {}\n255\n", img.width, img.height).into_bytes();
    out.extend(img.data.iter().map(|v| (v * 255.0).round() as u8));
    out
}
