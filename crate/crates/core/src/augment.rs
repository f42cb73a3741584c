//! Stochastic views for contrastive pre-training.
//!
//! Only intensity-preserving geometric transforms are used: horizontal and
//! vertical flips, rotation about the image center, and elastic
//! deformation. They are applied in that fixed order. No transform
//! rescales intensities; rotation fills uncovered pixels with 0.

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::SliceRecord;
use crate::rng::{mix64, rng_from, ChaCha8Rng};
use crate::{Error, Result};

/// Reference resolution for the default elastic parameters.
pub const REFERENCE_RESOLUTION: usize = 84;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub p_flip_h: f64,
    pub p_flip_v: f64,
    /// `(lo, hi)` in degrees; angles are drawn uniformly from this range.
    pub rotation_range_deg: (f64, f64),
    /// Peak displacement scale in pixels.
    pub elastic_alpha: f64,
    /// Gaussian smoothing width of the displacement field in pixels.
    pub elastic_sigma: f64,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            p_flip_h: 0.5,
            p_flip_v: 0.5,
            rotation_range_deg: (-15.0, 15.0),
            elastic_alpha: 10.0,
            elastic_sigma: 4.0,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration under which every transform is the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            p_flip_h: 0.0,
            p_flip_v: 0.0,
            rotation_range_deg: (0.0, 0.0),
            elastic_alpha: 0.0,
            elastic_sigma: 1.0,
            seed: 0,
        }
    }

    /// Scales the elastic parameters from the 84-pixel reference to `resolution`.
    pub fn scaled_for(&self, resolution: usize) -> Self {
        let s = resolution as f64 / REFERENCE_RESOLUTION as f64;
        AugmentConfig {
            elastic_alpha: self.elastic_alpha * s,
            elastic_sigma: self.elastic_sigma * s,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, p) in [("augment.p_flip_h", self.p_flip_h), ("augment.p_flip_v", self.p_flip_v)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::validation(name, format!("{p} is not a probability")));
            }
        }
        let (lo, hi) = self.rotation_range_deg;
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::validation(
                "augment.rotation_range_deg",
                format!("({lo}, {hi}) is not an ordered finite range"),
            ));
        }
        if !(self.elastic_alpha >= 0.0) || !self.elastic_alpha.is_finite() {
            return Err(Error::validation("augment.elastic_alpha", "must be >= 0"));
        }
        if !(self.elastic_sigma > 0.0) || !self.elastic_sigma.is_finite() {
            return Err(Error::validation("augment.elastic_sigma", "must be > 0"));
        }
        Ok(())
    }
}

/// Two augmented views of the same slice.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewPair {
    pub view_a: Array2<f32>,
    pub view_b: Array2<f32>,
    pub source: String,
}

pub fn flip_horizontal(pixels: ArrayView2<f32>) -> Array2<f32> {
    let mut out = pixels.to_owned();
    out.invert_axis(Axis(1));
    out.as_standard_layout().into_owned()
}

pub fn flip_vertical(pixels: ArrayView2<f32>) -> Array2<f32> {
    let mut out = pixels.to_owned();
    out.invert_axis(Axis(0));
    out.as_standard_layout().into_owned()
}

/// Mirrors horizontally and/or vertically with the configured probabilities.
/// Both decisions are always drawn so the stream position does not depend
/// on the outcome.
pub fn random_flip(pixels: ArrayView2<f32>, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let h = rng.random::<f64>() < config.p_flip_h;
    let v = rng.random::<f64>() < config.p_flip_v;
    let mut out = pixels.to_owned();
    if h {
        out = flip_horizontal(out.view());
    }
    if v {
        out = flip_vertical(out.view());
    }
    out
}

/// Bilinear sample at `(y, x)`, or `None` outside the pixel grid.
fn sample_inside(img: &ArrayView2<f32>, y: f64, x: f64) -> Option<f32> {
    let (h, w) = img.dim();
    let eps = 1e-9;
    if y < -eps || x < -eps || y > (h - 1) as f64 + eps || x > (w - 1) as f64 + eps {
        return None;
    }
    Some(sample_clamped(img, y, x))
}

/// Bilinear sample with coordinates clamped to the grid (border replication).
fn sample_clamped(img: &ArrayView2<f32>, y: f64, x: f64) -> f32 {
    let (h, w) = img.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (ty, tx) = (y - y0 as f64, x - x0 as f64);
    let a = img[[y0, x0]] as f64;
    let b = img[[y0, x1]] as f64;
    let c = img[[y1, x0]] as f64;
    let d = img[[y1, x1]] as f64;
    let top = a + (b - a) * tx;
    let bottom = c + (d - c) * tx;
    (top + (bottom - top) * ty) as f32
}

/// Rotates by `degrees` counter-clockwise about the image center with
/// bilinear resampling. Pixels whose source falls outside the grid are 0.
pub fn rotate(pixels: ArrayView2<f32>, degrees: f64) -> Array2<f32> {
    if degrees == 0.0 {
        return pixels.to_owned();
    }
    let (h, w) = pixels.dim();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = degrees.to_radians().sin_cos();
    Array2::from_shape_fn((h, w), |(i, j)| {
        // inverse map: output pixel -> source coordinate
        let dy = i as f64 - cy;
        let dx = j as f64 - cx;
        let sx = cos * dx - sin * dy + cx;
        let sy = sin * dx + cos * dy + cy;
        sample_inside(&pixels, sy, sx).unwrap_or(0.0)
    })
}

pub fn random_rotation(pixels: ArrayView2<f32>, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let (lo, hi) = config.rotation_range_deg;
    let angle = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    rotate(pixels, angle)
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as i64;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable Gaussian smoothing with replicated borders.
fn smooth(field: &Array2<f64>, sigma: f64) -> Array2<f64> {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as i64;
    let (h, w) = field.dim();
    let clamp = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let rows = Array2::from_shape_fn((h, w), |(i, j)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * field[[i, clamp(j as i64 + t as i64 - r, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(i, j)| {
        k.iter()
            .enumerate()
            .map(|(t, kv)| kv * rows[[clamp(i as i64 + t as i64 - r, h), j]])
            .sum::<f64>()
    })
}

/// Random displacement field `(dy, dx)`: i.i.d. uniform in [-1, 1] per pixel
/// and axis, Gaussian-smoothed, scaled by `alpha`. Every component is
/// bounded by `alpha`, so each displacement is at most `alpha * sqrt(2)`.
pub fn displacement_field(
    shape: (usize, usize),
    alpha: f64,
    sigma: f64,
    rng: &mut ChaCha8Rng,
) -> (Array2<f64>, Array2<f64>) {
    let mut draw = || Array2::from_shape_fn(shape, |_| rng.random_range(-1.0..=1.0));
    let (dy, dx) = (draw(), draw());
    (smooth(&dy, sigma) * alpha, smooth(&dx, sigma) * alpha)
}

/// Elastic deformation with bilinear sampling and border replication.
pub fn elastic_deform(pixels: ArrayView2<f32>, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let (dy, dx) = displacement_field(pixels.dim(), config.elastic_alpha, config.elastic_sigma, rng);
    if config.elastic_alpha == 0.0 {
        return pixels.to_owned();
    }
    Array2::from_shape_fn(pixels.dim(), |(i, j)| {
        sample_clamped(&pixels, i as f64 + dy[[i, j]], j as f64 + dx[[i, j]])
    })
}

/// flip -> rotation -> elastic, all drawn from one rng stream.
pub fn augment_chain(pixels: ArrayView2<f32>, config: &AugmentConfig, rng: &mut ChaCha8Rng) -> Array2<f32> {
    let flipped = random_flip(pixels, config, rng);
    let rotated = random_rotation(flipped.view(), config, rng);
    elastic_deform(rotated.view(), config, rng)
}

/// Seed for view `view` (0 or 1) of a pair: `mix64(pair_seed, view)`,
/// the SplitMix64 finalizer applied to `pair_seed + (view + 1) * golden`.
pub fn view_seed(pair_seed: u64, view: u64) -> u64 {
    mix64(pair_seed, view)
}

pub fn augment_pixels(pixels: ArrayView2<f32>, config: &AugmentConfig, pair_seed: u64) -> (Array2<f32>, Array2<f32>) {
    let a = augment_chain(pixels, config, &mut rng_from(view_seed(pair_seed, 0)));
    let b = augment_chain(pixels, config, &mut rng_from(view_seed(pair_seed, 1)));
    (a, b)
}

/// Builds a positive pair from two independent runs of the full chain.
pub fn make_view_pair(slice: &SliceRecord, config: &AugmentConfig, pair_seed: u64) -> Result<ViewPair> {
    config.validate()?;
    let (view_a, view_b) = augment_pixels(slice.pixels.view(), config, pair_seed);
    Ok(ViewPair { view_a, view_b, source: slice.locator() })
}
