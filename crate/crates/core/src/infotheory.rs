//! Histogram estimate of the mutual information between object and
//! measurement.
//!
//! Objects are equally likely. For each object, `samples` noisy measurements
//! of its clean sensor image are drawn and binned on a grid shared by all
//! objects: `BINS` uniform bins per pixel over `[0, 1.25 * max y]`. With
//! counts `c[x][y]`, `N` objects and `S` samples per object,
//!
//! `I = sum_{x,y} c[x][y] / (N S) * log2(N c[x][y] / sum_x' c[x'][y])`
//!
//! with `0 log 0 = 0`. Noise for an object comes from a stream keyed by its
//! clean image, so reordering the objects does not change the draws.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::channel::{check_m, noisy_pixel};
use crate::error::{Error, Result};
use crate::optics::{ComplexField, ForwardModel, IntensityImage, LedPattern};
use crate::rng::{substream, Rng};
use rand_distr::{Distribution, StandardNormal};

pub const BINS: usize = 256;
pub const RANGE_HEADROOM: f64 = 1.25;
/// Larger measurements make the joint histogram meaningless.
pub const MAX_PIXELS: usize = 4;
/// Mass a single bin may hold for every object before the binning is
/// flagged as too coarse.
pub const CONCENTRATION_LIMIT: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiEstimate {
    pub bits: f64,
    pub samples_per_object: usize,
    pub bin_width: f64,
    pub bin_count: usize,
    pub objects: usize,
    pub pixels: usize,
    /// Some bin holds more than `CONCENTRATION_LIMIT` of every object's mass.
    pub under_resolved: bool,
}

/// One row of `mi_report.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiReportRow {
    pub snapshot: String,
    pub bits: f64,
    pub samples: usize,
    pub bins: usize,
}

impl MiReportRow {
    pub fn new(snapshot: impl Into<String>, est: &MiEstimate) -> Self {
        Self {
            snapshot: snapshot.into(),
            bits: est.bits,
            samples: est.samples_per_object,
            bins: est.bin_count,
        }
    }
}

/// FNV-1a over the pixel bits; keys an object's noise stream.
fn image_key(image: &IntensityImage) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for v in &image.data {
        for b in v.to_bits().to_le_bytes() {
            h ^= u64::from(b);
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
    }
    h
}

fn draw(rng: &mut Rng, clean: &[f64], m: f64, out: &mut [f64]) {
    for (o, &i) in out.iter_mut().zip(clean) {
        let g: f64 = StandardNormal.sample(rng);
        *o = noisy_pixel(i, g, m);
    }
}

/// Estimates MI from clean sensor images, one per equally likely object.
pub fn estimate_from_clean(clean: &[IntensityImage], m: f64, samples: usize, seed: u64) -> Result<MiEstimate> {
    check_m(m)?;
    if samples == 0 {
        return Err(Error::InvalidConfig("samples per object must be positive".into()));
    }
    let Some(first) = clean.first() else {
        return Err(Error::EmptyDataset("no objects for MI estimate".into()));
    };
    let pixels = first.data.len();
    if pixels == 0 || pixels > MAX_PIXELS {
        return Err(Error::Contract(format!(
            "MI estimation needs 1 to {MAX_PIXELS} measurement pixels, got {pixels}"
        )));
    }
    if let Some(bad) = clean.iter().find(|c| c.data.len() != pixels) {
        return Err(Error::Shape(format!("measurement of {} pixels among {pixels}-pixel ones", bad.data.len())));
    }
    if clean.iter().flat_map(|c| &c.data).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("clean measurement".into()));
    }

    let streams: Vec<u64> = clean.iter().map(image_key).collect();
    let mut y = vec![0.0; pixels];

    // First pass fixes the shared range; the second replays the same draws.
    let mut max_y = 0.0f64;
    for (c, &key) in clean.iter().zip(&streams) {
        let mut rng = substream(seed, key);
        for _ in 0..samples {
            draw(&mut rng, &c.data, m, &mut y);
            max_y = y.iter().fold(max_y, |a, &b| a.max(b));
        }
    }
    let span = if max_y > 0.0 { RANGE_HEADROOM * max_y } else { 1.0 };
    let bin_width = span / BINS as f64;

    let mut counts: Vec<BTreeMap<u64, u64>> = Vec::with_capacity(clean.len());
    for (c, &key) in clean.iter().zip(&streams) {
        let mut rng = substream(seed, key);
        let mut hist = BTreeMap::new();
        for _ in 0..samples {
            draw(&mut rng, &c.data, m, &mut y);
            let bin = y.iter().fold(0u64, |acc, &v| {
                let b = ((v / bin_width) as usize).min(BINS - 1);
                acc * BINS as u64 + b as u64
            });
            *hist.entry(bin).or_insert(0u64) += 1;
        }
        counts.push(hist);
    }
    Ok(MiEstimate {
        bits: mi_from_counts(&counts, samples),
        samples_per_object: samples,
        bin_width,
        bin_count: BINS,
        objects: clean.len(),
        pixels,
        under_resolved: concentrated(&counts, samples),
    })
}

/// Plug-in MI of per-object histograms that each hold `samples` counts.
fn mi_from_counts(counts: &[BTreeMap<u64, u64>], samples: usize) -> f64 {
    let n = counts.len() as f64;
    let mut marginal: BTreeMap<u64, u64> = BTreeMap::new();
    for h in counts {
        for (&b, &c) in h {
            *marginal.entry(b).or_insert(0) += c;
        }
    }
    let total = n * samples as f64;
    let mut bits = 0.0;
    for h in counts {
        for (b, &c) in h {
            let c = c as f64;
            bits += c / total * (n * c / marginal[b] as f64).log2();
        }
    }
    bits
}

fn concentrated(counts: &[BTreeMap<u64, u64>], samples: usize) -> bool {
    let limit = CONCENTRATION_LIMIT * samples as f64;
    let Some(first) = counts.first() else { return false };
    first
        .iter()
        .filter(|(_, &c)| c as f64 > limit)
        .any(|(b, _)| counts[1..].iter().all(|h| h.get(b).is_some_and(|&c| c as f64 > limit)))
}

/// Estimates MI between `objects` and their measurements under `pattern`.
pub fn estimate_mi(
    optics: &ForwardModel,
    objects: &[ComplexField],
    pattern: &LedPattern,
    m: f64,
    samples: usize,
    seed: u64,
) -> Result<MiEstimate> {
    let (r, c) = optics.lowres_shape();
    if r * c > MAX_PIXELS {
        return Err(Error::Contract(format!(
            "MI estimation needs at most {MAX_PIXELS} measurement pixels, the sensor has {}",
            r * c
        )));
    }
    let clean = objects
        .iter()
        .map(|o| optics.forward_pattern(o, pattern))
        .collect::<Result<Vec<_>>>()?;
    estimate_from_clean(&clean, m, samples, seed)
}
