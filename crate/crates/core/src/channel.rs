//! Gaussian approximation of Poisson shot noise on sensor intensities.
//!
//! Each pixel becomes `max((sqrt(I m) g + I m) / m, 0)` with `g ~ N(0, 1)`
//! drawn fresh on every evaluation. Larger `m` means higher signal-to-noise;
//! `m = inf` is the noiseless limit.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::optics::IntensityImage;
use crate::rng::Rng;

/// Noise level and seed of one noise stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NoiseSpec {
    m: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(m: f64, seed: u64) -> Result<Self> {
        check_m(m)?;
        Ok(Self { m, seed })
    }

    pub fn noiseless(seed: u64) -> Self {
        Self {
            m: f64::INFINITY,
            seed,
        }
    }

    pub fn m(&self) -> f64 {
        self.m
    }
}

pub(crate) fn check_m(m: f64) -> Result<()> {
    if m > 0.0 {
        Ok(())
    } else {
        Err(Error::InvalidConfig(format!(
            "noise factor m must be positive, got {m}"
        )))
    }
}

/// One noisy pixel. Written as `I + sqrt(I / m) g`, which equals the
/// `(sqrt(I m) g + I m) / m` form for finite `m` and stays defined at `m = inf`.
#[inline]
pub fn noisy_pixel(intensity: f64, g: f64, m: f64) -> f64 {
    let i = intensity.max(0.0);
    (i + (i / m).sqrt() * g).max(0.0)
}

/// Derivative of [`noisy_pixel`] with respect to the intensity at fixed `g`:
/// `1 + g / (2 sqrt(I m))` away from the clip, zero where the output clips.
/// At `I = 0` the singular term is dropped and the slope is 1.
#[inline]
pub fn noisy_pixel_derivative(intensity: f64, g: f64, m: f64) -> f64 {
    if intensity <= 0.0 {
        return 1.0;
    }
    let pre = intensity + (intensity / m).sqrt() * g;
    if pre < 0.0 {
        0.0
    } else {
        1.0 + g / (2.0 * (intensity * m).sqrt())
    }
}

pub fn standard_normals(rng: &mut Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

/// Applies the noise model with fresh draws from `rng`.
pub fn apply_noise(image: &IntensityImage, m: f64, rng: &mut Rng) -> Result<IntensityImage> {
    check_m(m)?;
    for (p, v) in image.data.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(format!("input pixel {p} is {v}")));
        }
    }
    let g = standard_normals(rng, image.data.len());
    Ok(apply_noise_with(image, &g, m))
}

/// Applies the noise model with caller-supplied draws.
pub fn apply_noise_with(image: &IntensityImage, g: &[f64], m: f64) -> IntensityImage {
    assert_eq!(g.len(), image.data.len(), "one draw per pixel");
    IntensityImage {
        rows: image.rows,
        cols: image.cols,
        data: image
            .data
            .iter()
            .zip(g)
            .map(|(&i, &gi)| noisy_pixel(i, gi, m))
            .collect(),
    }
}
