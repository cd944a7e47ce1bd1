//! Input difficulty estimation.
//!
//! Three cheap image statistics are fused into a single score in `[0,1]`:
//!
//! - **edge density**: fraction of pixels whose Sobel gradient magnitude
//!   exceeds `mean + k * stddev` of the magnitude field
//! - **pixel variance**: population variance around per-channel spatial
//!   means, divided by 0.25 (the largest variance a `[0,1]` variable can have)
//! - **gradient complexity**: mean absolute 4-neighbour Laplacian response,
//!   divided by 4
//!
//! Edge density and gradient complexity run on the Rec.601 luma of color
//! inputs; variance uses every channel. Both convolutions use replicate
//! padding, so output fields have the input's size and constant images give
//! exactly zero response.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImagePlane;

const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];
const LAPLACIAN: [[f64; 3]; 3] = [[0.0, 1.0, 0.0], [1.0, -4.0, 1.0], [0.0, 1.0, 0.0]];

/// Largest variance of a random variable supported on `[0,1]`.
const MAX_VARIANCE: f64 = 0.25;
/// Largest absolute Laplacian response on `[0,1]` intensities.
const MAX_LAPLACIAN: f64 = 4.0;

/// Fusion weights for the three components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyWeights {
    pub edge: f64,
    pub variance: f64,
    pub gradient: f64,
}

impl Default for DifficultyWeights {
    fn default() -> Self {
        Self {
            edge: 0.4,
            variance: 0.3,
            gradient: 0.3,
        }
    }
}

impl DifficultyWeights {
    pub fn new(edge: f64, variance: f64, gradient: f64) -> Result<Self> {
        let w = Self {
            edge,
            variance,
            gradient,
        };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.edge, self.variance, self.gradient];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::InvalidWeights(format!(
                "weights must be non-negative, got {all:?}"
            )));
        }
        let sum: f64 = all.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidWeights(format!(
                "weights must sum to 1, got {sum}"
            )));
        }
        Ok(())
    }

    fn fuse(&self, edge: f64, variance: f64, gradient: f64) -> f64 {
        (self.edge * edge + self.variance * variance + self.gradient * gradient).clamp(0.0, 1.0)
    }
}

/// Component scores and their weighted fusion, each in `[0,1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DifficultyScore {
    pub edge: f64,
    pub variance: f64,
    pub gradient: f64,
    pub fused: f64,
}

impl DifficultyScore {
    /// Fuses precomputed components.
    pub fn from_components(edge: f64, variance: f64, gradient: f64, w: &DifficultyWeights) -> Self {
        Self {
            edge,
            variance,
            gradient,
            fused: w.fuse(edge, variance, gradient),
        }
    }
}

/// Estimator configuration: fusion weights and the edge threshold multiplier.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DifficultyConfig {
    pub weights: DifficultyWeights,
    /// Edge threshold is `mean + edge_k * stddev` of the gradient magnitude.
    pub edge_k: f64,
}

impl Default for DifficultyConfig {
    fn default() -> Self {
        Self {
            weights: DifficultyWeights::default(),
            edge_k: 1.0,
        }
    }
}

/// Gradient magnitude field, row-major, same size as its source image.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientField {
    pub width: usize,
    pub height: usize,
    pub values: Vec<f64>,
}

/// Rec.601 luma conversion. Single-channel inputs are returned unchanged.
pub fn to_grayscale(img: &ImagePlane) -> Result<ImagePlane> {
    match img.channels() {
        1 => Ok(img.clone()),
        3 => {
            let data = img
                .data()
                .chunks_exact(3)
                .map(|px| (LUMA[0] * px[0] + LUMA[1] * px[1] + LUMA[2] * px[2]).clamp(0.0, 1.0))
                .collect();
            ImagePlane::new(img.width(), img.height(), 1, data)
        }
        c => Err(Error::UnsupportedChannels(c)),
    }
}

// All kernels sum to zero; responses are taken relative to the centre pixel
// so flat neighbourhoods are exactly 0.
fn convolve3(gray: &ImagePlane, x: usize, y: usize, kernel: &[[f64; 3]; 3]) -> f64 {
    let center = gray.clamped(x as isize, y as isize);
    let mut acc = 0.0;
    for (ky, row) in kernel.iter().enumerate() {
        for (kx, k) in row.iter().enumerate() {
            if *k != 0.0 {
                let v = gray.clamped(x as isize + kx as isize - 1, y as isize + ky as isize - 1);
                acc += k * (v - center);
            }
        }
    }
    acc
}

fn require_gray(img: &ImagePlane) -> Result<()> {
    if img.channels() != 1 {
        return Err(Error::NotGrayscale(img.channels()));
    }
    Ok(())
}

/// Sobel gradient magnitude `sqrt(gx^2 + gy^2)` at every pixel.
pub fn sobel_magnitude(gray: &ImagePlane) -> Result<GradientField> {
    require_gray(gray)?;
    let (w, h) = (gray.width(), gray.height());
    let mut values = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            let gx = convolve3(gray, x, y, &SOBEL_X);
            let gy = convolve3(gray, x, y, &SOBEL_Y);
            values.push(gx.hypot(gy));
        }
    }
    Ok(GradientField {
        width: w,
        height: h,
        values,
    })
}

/// Fraction of pixels strictly above `mean + k * stddev` of the field.
pub fn edge_density(field: &GradientField, k: f64) -> Result<f64> {
    let values = &field.values;
    if values.is_empty() {
        return Err(Error::Empty("gradient field"));
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if min == max {
        return Ok(0.0);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let threshold = mean + k * var.sqrt();
    let above = values.iter().filter(|&&v| v > threshold).count();
    Ok(above as f64 / n)
}

/// Normalized population variance around per-channel spatial means.
pub fn pixel_variance(img: &ImagePlane) -> f64 {
    let c = img.channels();
    let pixels = img.width() * img.height();
    // deviations are measured from the first pixel so flat channels are exact
    let origin = &img.data()[..c];
    let mut means = vec![0.0; c];
    for px in img.data().chunks_exact(c) {
        for ((m, v), o) in means.iter_mut().zip(px).zip(origin) {
            *m += v - o;
        }
    }
    for m in &mut means {
        *m /= pixels as f64;
    }
    let sum_sq: f64 = img
        .data()
        .chunks_exact(c)
        .flat_map(|px| {
            px.iter()
                .zip(&means)
                .zip(origin)
                .map(|((v, m), o)| (v - o - m).powi(2))
        })
        .sum();
    let raw = sum_sq / img.data().len() as f64;
    (raw / MAX_VARIANCE).clamp(0.0, 1.0)
}

/// Normalized mean absolute Laplacian response.
pub fn gradient_complexity(gray: &ImagePlane) -> Result<f64> {
    require_gray(gray)?;
    let (w, h) = (gray.width(), gray.height());
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            total += convolve3(gray, x, y, &LAPLACIAN).abs();
        }
    }
    let mean = total / (w * h) as f64;
    Ok((mean / MAX_LAPLACIAN).clamp(0.0, 1.0))
}

/// Full difficulty estimate with the default edge multiplier.
pub fn difficulty(img: &ImagePlane, weights: &DifficultyWeights) -> Result<DifficultyScore> {
    difficulty_with(
        img,
        &DifficultyConfig {
            weights: *weights,
            ..DifficultyConfig::default()
        },
    )
}

pub fn difficulty_with(img: &ImagePlane, cfg: &DifficultyConfig) -> Result<DifficultyScore> {
    cfg.weights.validate()?;
    let gray = to_grayscale(img)?;
    let edge = edge_density(&sobel_magnitude(&gray)?, cfg.edge_k)?;
    let variance = pixel_variance(img);
    let gradient = gradient_complexity(&gray)?;
    Ok(DifficultyScore::from_components(
        edge,
        variance,
        gradient,
        &cfg.weights,
    ))
}
