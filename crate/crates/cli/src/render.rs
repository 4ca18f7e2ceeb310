use std::f64::consts::PI;
use std::path::Path;

use fpm_core::LedGeometry;
use image::GrayImage;

use crate::failure::{CliResult, Failure};

/// Pixels per LED cell in heatmaps.
pub const LED_CELL: u32 = 16;

/// Maps `[lo, hi]` linearly onto `0..=255`, clamping outside values.
pub fn to_gray(values: &[f64], lo: f64, hi: f64) -> Vec<u8> {
    let span = if hi > lo { hi - lo } else { 1.0 };
    values
        .iter()
        .map(|&v| (((v - lo) / span).clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect()
}

pub fn save_gray(path: &Path, rows: usize, cols: usize, pixels: Vec<u8>) -> CliResult<()> {
    let img = GrayImage::from_raw(cols as u32, rows as u32, pixels)
        .ok_or_else(|| Failure::runtime(format!("{}: pixel buffer does not match {rows}x{cols}", path.display())))?;
    img.save(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}

/// Scaled to `[0, max]` of the image itself.
pub fn save_magnitude(path: &Path, rows: usize, cols: usize, values: &[f64]) -> CliResult<()> {
    let hi = values.iter().fold(0.0f64, |a, &b| a.max(b));
    save_gray(path, rows, cols, to_gray(values, 0.0, hi))
}

/// Phase on the fixed scale `[-pi, pi]`.
pub fn save_phase(path: &Path, rows: usize, cols: usize, values: &[f64]) -> CliResult<()> {
    save_gray(path, rows, cols, to_gray(values, -PI, PI))
}

/// LED weights on `[0, 1]` laid out on the LED grid; inactive cells are black.
pub fn save_led_heatmap(path: &Path, geometry: &LedGeometry, weights: &[f64]) -> CliResult<()> {
    let side = geometry.grid as u32 * LED_CELL;
    let mut img = GrayImage::new(side, side);
    for (&(r, c), &w) in geometry.cells.iter().zip(weights) {
        let level = to_gray(&[w], 0.0, 1.0)[0];
        for y in 0..LED_CELL {
            for x in 0..LED_CELL {
                img.put_pixel(c as u32 * LED_CELL + x, r as u32 * LED_CELL + y, image::Luma([level]));
            }
        }
    }
    img.save(path).map_err(|e| Failure::runtime(format!("{}: {e}", path.display())))
}
