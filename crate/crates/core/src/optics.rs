//! Coherent single-LED imaging, the incoherent multi-LED sum, and sensor binning.
//!
//! An LED at `(x, y, z)` illuminates the thin sample with a tilted plane wave,
//! which shifts the object spectrum. The objective keeps the part of the shifted
//! spectrum inside its pupil; the sensor records the intensity of the filtered
//! field integrated over `k x k` high-resolution pixels. LEDs are mutually
//! incoherent, so a pattern of LEDs produces the weighted sum of the single-LED
//! intensities, which is linear in the LED weights.

use std::fmt;
use std::str::FromStr;

use rustfft::num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fourier::{bin_index, signed_bin, Fourier2d};

/// Row-major active-LED mask, serialized as one `"0"`/`"1"` string per grid row.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct LedMask {
    side: usize,
    active: Vec<bool>,
}

impl LedMask {
    pub fn full(side: usize) -> Self {
        Self {
            side,
            active: vec![true; side * side],
        }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn is_active(&self, row: usize, col: usize) -> bool {
        self.active[row * self.side + col]
    }

    pub fn active_count(&self) -> usize {
        self.active.iter().filter(|&&a| a).count()
    }

    /// `(row, col)` of every active LED in row-major order.
    pub fn active_cells(&self) -> Vec<(usize, usize)> {
        (0..self.side)
            .flat_map(|r| (0..self.side).map(move |c| (r, c)))
            .filter(|&(r, c)| self.is_active(r, c))
            .collect()
    }
}

impl TryFrom<Vec<String>> for LedMask {
    type Error = String;

    fn try_from(rows: Vec<String>) -> std::result::Result<Self, String> {
        let side = rows.len();
        let mut active = Vec::with_capacity(side * side);
        for (i, row) in rows.iter().enumerate() {
            if row.chars().count() != side {
                return Err(format!(
                    "mask row {i} has {} entries, expected {side}",
                    row.chars().count()
                ));
            }
            for ch in row.chars() {
                match ch {
                    '1' => active.push(true),
                    '0' => active.push(false),
                    other => return Err(format!("mask row {i}: unexpected character {other:?}")),
                }
            }
        }
        Ok(Self { side, active })
    }
}

impl From<LedMask> for Vec<String> {
    fn from(mask: LedMask) -> Self {
        mask.active
            .chunks(mask.side.max(1))
            .map(|row| row.iter().map(|&a| if a { '1' } else { '0' }).collect())
            .collect()
    }
}

/// Microscope and LED-array parameters, all lengths in meters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpticalConfig {
    pub name: String,
    pub wavelength: f64,
    pub objective_na: f64,
    pub magnification: f64,
    pub sensor_pixel: f64,
    pub object_extent: f64,
    pub highres_pixels: usize,
    pub led_pitch: f64,
    pub led_grid: usize,
    pub led_height: f64,
    pub active_led_mask: LedMask,
}

/// The shipped optical setups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 32x32 MNIST objects, 7x7 grid with 45 active LEDs.
    Table1,
    /// 512x512 UCSB objects, 9x9 grid with 69 active LEDs.
    Table2,
    /// 4x4 binary objects imaged onto a single sensor pixel, 3x3 grid.
    Table3,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Table1, Preset::Table2, Preset::Table3];

    pub fn id(self) -> &'static str {
        match self {
            Preset::Table1 => "table1",
            Preset::Table2 => "table2",
            Preset::Table3 => "table3",
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            Preset::Table1 => include_str!("../presets/table1.toml"),
            Preset::Table2 => include_str!("../presets/table2.toml"),
            Preset::Table3 => include_str!("../presets/table3.toml"),
        }
    }

    pub fn config(self) -> OpticalConfig {
        OpticalConfig::from_toml_str(self.source()).expect("shipped preset is valid")
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.id() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown preset {s:?}")))
    }
}

impl OpticalConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let config: OpticalConfig =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("optical config serializes")
    }

    /// Checks the physical invariants, including an integral sensor downsampling factor.
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(self.objective_na > 0.0 && self.objective_na <= 1.0) {
            return bad(format!("objective NA {} outside (0, 1]", self.objective_na));
        }
        for (name, v) in [
            ("wavelength", self.wavelength),
            ("magnification", self.magnification),
            ("sensor_pixel", self.sensor_pixel),
            ("object_extent", self.object_extent),
            ("led_pitch", self.led_pitch),
            ("led_height", self.led_height),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return bad(format!("{name} must be positive and finite, got {v}"));
            }
        }
        if self.highres_pixels == 0 || self.led_grid == 0 {
            return bad("grid sizes must be positive".into());
        }
        if self.active_led_mask.side() != self.led_grid {
            return bad(format!(
                "active LED mask is {0}x{0}, LED grid is {1}x{1}",
                self.active_led_mask.side(),
                self.led_grid
            ));
        }
        if self.active_led_mask.active_count() == 0 {
            return bad("no active LEDs".into());
        }
        let ratio = self.downsample_ratio();
        let k = ratio.round();
        if k < 1.0 || (ratio - k).abs() > 1e-6 * k {
            return bad(format!(
                "sensor pixel maps to {ratio} object pixels; the downsampling factor must be a positive integer"
            ));
        }
        if self.highres_pixels % (k as usize) != 0 {
            return bad(format!(
                "{} high-resolution pixels are not divisible by downsampling factor {k}",
                self.highres_pixels
            ));
        }
        Ok(())
    }

    fn downsample_ratio(&self) -> f64 {
        (self.sensor_pixel / self.magnification)
            / (self.object_extent / self.highres_pixels as f64)
    }

    /// Sensor binning factor `k`: each sensor pixel integrates `k x k` object pixels.
    pub fn downsample_factor(&self) -> usize {
        self.downsample_ratio().round() as usize
    }

    pub fn highres_shape(&self) -> (usize, usize) {
        (self.highres_pixels, self.highres_pixels)
    }

    pub fn lowres_shape(&self) -> (usize, usize) {
        let n = self.highres_pixels / self.downsample_factor();
        (n, n)
    }

    pub fn highres_pitch(&self) -> f64 {
        self.object_extent / self.highres_pixels as f64
    }

    pub fn active_led_count(&self) -> usize {
        self.active_led_mask.active_count()
    }

    pub fn geometry(&self) -> LedGeometry {
        LedGeometry::from_config(self)
    }
}

/// Positions of the active LEDs, grid centered on the optical axis.
#[derive(Clone, Debug, PartialEq)]
pub struct LedGeometry {
    pub positions: Vec<[f64; 3]>,
    /// `(row, col)` grid cell of each position.
    pub cells: Vec<(usize, usize)>,
    pub grid: usize,
}

impl LedGeometry {
    pub fn from_config(config: &OpticalConfig) -> Self {
        let center = (config.led_grid as f64 - 1.0) / 2.0;
        let cells = config.active_led_mask.active_cells();
        let positions = cells
            .iter()
            .map(|&(r, c)| {
                [
                    (c as f64 - center) * config.led_pitch,
                    (r as f64 - center) * config.led_pitch,
                    config.led_height,
                ]
            })
            .collect();
        Self {
            positions,
            cells,
            grid: config.led_grid,
        }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }
}

/// Illumination spatial frequency `(u_x, u_y)` of an LED, in 1/m.
pub fn led_spatial_frequency(position: [f64; 3], wavelength: f64) -> Result<(f64, f64)> {
    let [x, y, z] = position;
    if !(wavelength > 0.0) {
        return Err(Error::InvalidGeometry(format!(
            "wavelength must be positive, got {wavelength}"
        )));
    }
    let r = (x * x + y * y + z * z).sqrt();
    if !(r > 0.0) || !r.is_finite() {
        return Err(Error::InvalidGeometry(format!(
            "degenerate LED position ({x}, {y}, {z})"
        )));
    }
    Ok((-x / (wavelength * r), -y / (wavelength * r)))
}

/// Objective NA plus the largest illumination NA over the active LEDs.
pub fn synthetic_na(config: &OpticalConfig) -> f64 {
    let max_sin = config
        .geometry()
        .positions
        .iter()
        .map(|&[x, y, z]| {
            let r = (x * x + y * y).sqrt();
            r / (r * r + z * z).sqrt()
        })
        .fold(0.0, f64::max);
    config.objective_na + max_sin
}

/// Binary circular low-pass filter in frequency space.
#[derive(Clone, Debug, PartialEq)]
pub struct PupilFunction {
    pub rows: usize,
    pub cols: usize,
    /// Row-major over DFT storage order.
    pub mask: Vec<bool>,
    /// Radius in 1/m.
    pub cutoff: f64,
}

impl PupilFunction {
    /// Mask of radius `cutoff` (1/m) on a grid with pixel pitch `pitch` (m).
    pub fn circular(rows: usize, cols: usize, pitch: f64, cutoff: f64) -> Self {
        let du_y = 1.0 / (rows as f64 * pitch);
        let du_x = 1.0 / (cols as f64 * pitch);
        let mut mask = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let uy = signed_bin(r, rows) as f64 * du_y;
            for c in 0..cols {
                let ux = signed_bin(c, cols) as f64 * du_x;
                mask.push((ux * ux + uy * uy).sqrt() <= cutoff);
            }
        }
        Self {
            rows,
            cols,
            mask,
            cutoff,
        }
    }

    pub fn passes(&self, row: usize, col: usize) -> bool {
        self.mask[row * self.cols + col]
    }

    /// Zeroes every spectrum sample outside the pupil.
    pub fn apply(&self, spectrum: &mut ComplexField) {
        assert_eq!(spectrum.shape(), (self.rows, self.cols), "pupil/grid shape");
        for (i, &keep) in self.mask.iter().enumerate() {
            if !keep {
                spectrum.re[i] = 0.0;
                spectrum.im[i] = 0.0;
            }
        }
    }
}

/// Objective pupil with cutoff `NA / wavelength` on the given high-resolution grid.
pub fn pupil_mask(config: &OpticalConfig, grid_shape: (usize, usize)) -> PupilFunction {
    PupilFunction::circular(
        grid_shape.0,
        grid_shape.1,
        config.object_extent / grid_shape.1 as f64,
        config.objective_na / config.wavelength,
    )
}

/// A 2-D grid of complex amplitudes.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexField {
    rows: usize,
    cols: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
    pub pixel_pitch: f64,
}

impl ComplexField {
    pub fn new(rows: usize, cols: usize, re: Vec<f64>, im: Vec<f64>, pixel_pitch: f64) -> Result<Self> {
        if re.len() != rows * cols || im.len() != rows * cols {
            return Err(Error::Shape(format!(
                "field planes have {} and {} values, expected {rows}x{cols}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self {
            rows,
            cols,
            re,
            im,
            pixel_pitch,
        })
    }

    pub fn zeros(rows: usize, cols: usize, pixel_pitch: f64) -> Self {
        Self::constant(rows, cols, pixel_pitch, Complex64::new(0.0, 0.0))
    }

    pub fn constant(rows: usize, cols: usize, pixel_pitch: f64, value: Complex64) -> Self {
        Self {
            rows,
            cols,
            re: vec![value.re; rows * cols],
            im: vec![value.im; rows * cols],
            pixel_pitch,
        }
    }

    pub fn from_fn(
        rows: usize,
        cols: usize,
        pixel_pitch: f64,
        mut f: impl FnMut(usize, usize) -> Complex64,
    ) -> Self {
        let mut field = Self::zeros(rows, cols, pixel_pitch);
        for r in 0..rows {
            for c in 0..cols {
                let v = f(r, c);
                field.re[r * cols + c] = v.re;
                field.im[r * cols + c] = v.im;
            }
        }
        field
    }

    pub fn from_complex(rows: usize, cols: usize, pixel_pitch: f64, values: &[Complex64]) -> Result<Self> {
        Self::new(
            rows,
            cols,
            values.iter().map(|v| v.re).collect(),
            values.iter().map(|v| v.im).collect(),
            pixel_pitch,
        )
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        let i = row * self.cols + col;
        Complex64::new(self.re[i], self.im[i])
    }

    pub fn to_complex(&self) -> Vec<Complex64> {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect()
    }

    /// Sum of squared moduli.
    pub fn energy(&self) -> f64 {
        self.re
            .iter()
            .zip(&self.im)
            .map(|(r, i)| r * r + i * i)
            .sum()
    }

    pub fn amplitude(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| r.hypot(*i)).collect()
    }

    pub fn phase(&self) -> Vec<f64> {
        self.re.iter().zip(&self.im).map(|(r, i)| i.atan2(*r)).collect()
    }

    pub fn fft2(&self, fourier: &Fourier2d) -> ComplexField {
        let mut out = self.clone();
        fourier.transform_planes(&mut out.re, &mut out.im, false);
        out
    }

    pub fn ifft2(&self, fourier: &Fourier2d) -> ComplexField {
        let mut out = self.clone();
        fourier.transform_planes(&mut out.re, &mut out.im, true);
        out
    }
}

/// A real-valued image, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct IntensityImage {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl IntensityImage {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn total(&self) -> f64 {
        self.data.iter().sum()
    }
}

/// `k x k` block mean of a row-major `rows x cols` grid.
pub fn block_mean(data: &[f64], rows: usize, cols: usize, k: usize) -> Vec<f64> {
    let (out_r, out_c) = (rows / k, cols / k);
    let norm = 1.0 / (k * k) as f64;
    let mut out = vec![0.0; out_r * out_c];
    for r in 0..out_r * k {
        let orow = &mut out[(r / k) * out_c..(r / k + 1) * out_c];
        for (c, &v) in data[r * cols..r * cols + out_c * k].iter().enumerate() {
            orow[c / k] += v;
        }
    }
    for v in &mut out {
        *v *= norm;
    }
    out
}

/// LED intensities `c_l`, one per active LED.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LedPattern {
    pub weights: Vec<f64>,
}

impl LedPattern {
    pub fn new(weights: Vec<f64>) -> Self {
        Self { weights }
    }

    pub fn uniform(count: usize, value: f64) -> Self {
        Self::new(vec![value; count])
    }

    pub fn one_hot(count: usize, index: usize) -> Self {
        let mut weights = vec![0.0; count];
        weights[index] = 1.0;
        Self::new(weights)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    /// Clamps every weight to `[0, 1]`.
    pub fn project(&mut self) {
        project_unit_interval(&mut self.weights);
    }

    pub fn check_physical(&self) -> Result<()> {
        for (l, &w) in self.weights.iter().enumerate() {
            if !w.is_finite() {
                return Err(Error::NonFinite(format!("LED {l} weight is {w}")));
            }
            if w < 0.0 {
                return Err(Error::ConstraintViolation(format!(
                    "LED {l} has negative intensity {w}"
                )));
            }
        }
        Ok(())
    }
}

pub(crate) fn project_unit_interval(weights: &mut [f64]) {
    for w in weights {
        *w = w.clamp(0.0, 1.0);
    }
}

/// Dense `pixels x leds` matrix, row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct PatternJacobian {
    pub pixels: usize,
    pub leds: usize,
    pub data: Vec<f64>,
}

impl PatternJacobian {
    pub fn column(&self, led: usize) -> Vec<f64> {
        (0..self.pixels).map(|p| self.data[p * self.leds + led]).collect()
    }

    pub fn apply(&self, weights: &[f64]) -> Vec<f64> {
        assert_eq!(weights.len(), self.leds);
        self.data
            .chunks_exact(self.leds)
            .map(|row| row.iter().zip(weights).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Precomputed forward model for one optical configuration.
///
/// Each active LED maps to a list of `(destination, source)` spectrum indices:
/// the filtered spectrum is `F[k] = P[k] O[k - s_l]` with `s_l` the LED's
/// illumination frequency rounded to the nearest DFT bin.
#[derive(Clone, Debug)]
pub struct ForwardModel {
    config: OpticalConfig,
    geometry: LedGeometry,
    pupil: PupilFunction,
    shifts: Vec<(isize, isize)>,
    taps: Vec<Vec<(usize, usize)>>,
    fourier: Fourier2d,
    factor: usize,
}

impl ForwardModel {
    pub fn new(config: &OpticalConfig) -> Result<Self> {
        config.validate()?;
        let (rows, cols) = config.highres_shape();
        let geometry = config.geometry();
        let pupil = pupil_mask(config, (rows, cols));
        let mut shifts = Vec::with_capacity(geometry.len());
        let mut taps = Vec::with_capacity(geometry.len());
        for (l, &pos) in geometry.positions.iter().enumerate() {
            let (ux, uy) = led_spatial_frequency(pos, config.wavelength)?;
            let sx = (ux * cols as f64 * config.highres_pitch()).round() as isize;
            let sy = (uy * rows as f64 * config.highres_pitch()).round() as isize;
            let mut led_taps = Vec::new();
            for r in 0..rows {
                for c in 0..cols {
                    if !pupil.passes(r, c) {
                        continue;
                    }
                    let src_r = bin_index(signed_bin(r, rows) - sy, rows);
                    let src_c = bin_index(signed_bin(c, cols) - sx, cols);
                    match (src_r, src_c) {
                        (Some(sr), Some(sc)) => led_taps.push((r * cols + c, sr * cols + sc)),
                        _ => {
                            return Err(Error::OutOfBand {
                                led: l,
                                shift_x: sx,
                                shift_y: sy,
                                rows,
                                cols,
                            })
                        }
                    }
                }
            }
            shifts.push((sx, sy));
            taps.push(led_taps);
        }
        Ok(Self {
            config: config.clone(),
            geometry,
            pupil,
            shifts,
            taps,
            fourier: Fourier2d::new(rows, cols),
            factor: config.downsample_factor(),
        })
    }

    pub fn config(&self) -> &OpticalConfig {
        &self.config
    }

    pub fn geometry(&self) -> &LedGeometry {
        &self.geometry
    }

    pub fn pupil(&self) -> &PupilFunction {
        &self.pupil
    }

    pub fn fourier(&self) -> &Fourier2d {
        &self.fourier
    }

    pub fn led_count(&self) -> usize {
        self.geometry.len()
    }

    /// Spectrum shift `(s_x, s_y)` in DFT bins for each active LED.
    pub fn shifts(&self) -> &[(isize, isize)] {
        &self.shifts
    }

    pub fn downsample_factor(&self) -> usize {
        self.factor
    }

    pub fn lowres_shape(&self) -> (usize, usize) {
        self.config.lowres_shape()
    }

    fn check_object(&self, object: &ComplexField) -> Result<()> {
        if object.shape() != self.config.highres_shape() {
            return Err(Error::Shape(format!(
                "object is {:?}, optics expect {:?}",
                object.shape(),
                self.config.highres_shape()
            )));
        }
        Ok(())
    }

    fn check_led(&self, led: usize) -> Result<()> {
        if led >= self.led_count() {
            return Err(Error::Contract(format!(
                "LED index {led} out of range for {} active LEDs",
                self.led_count()
            )));
        }
        Ok(())
    }

    pub fn spectrum(&self, object: &ComplexField) -> Result<ComplexField> {
        self.check_object(object)?;
        Ok(object.fft2(&self.fourier))
    }

    /// High-resolution intensity `|F^-1{P O_shifted}|^2` before sensor binning.
    pub fn highres_intensity_from_spectrum(&self, spectrum: &ComplexField, led: usize) -> Vec<f64> {
        let n = spectrum.len();
        let mut buf = vec![Complex64::new(0.0, 0.0); n];
        for &(dst, src) in &self.taps[led] {
            buf[dst] = Complex64::new(spectrum.re[src], spectrum.im[src]);
        }
        self.fourier.inverse(&mut buf);
        buf.iter().map(|c| c.norm_sqr()).collect()
    }

    pub fn single_led_from_spectrum(&self, spectrum: &ComplexField, led: usize) -> IntensityImage {
        let (rows, cols) = spectrum.shape();
        let hi = self.highres_intensity_from_spectrum(spectrum, led);
        let (lr, lc) = self.lowres_shape();
        IntensityImage {
            rows: lr,
            cols: lc,
            data: block_mean(&hi, rows, cols, self.factor),
        }
    }

    /// Low-resolution sensor image under LED `led` alone at unit intensity.
    pub fn forward_single_led(&self, object: &ComplexField, led: usize) -> Result<IntensityImage> {
        self.check_led(led)?;
        let spectrum = self.spectrum(object)?;
        Ok(self.single_led_from_spectrum(&spectrum, led))
    }

    /// Per-LED low-resolution images stacked LED-major: `leds x lowres pixels`.
    pub fn led_stack(&self, object: &ComplexField) -> Result<Vec<f64>> {
        let spectrum = self.spectrum(object)?;
        let mut out = Vec::with_capacity(self.led_count() * self.lowres_pixels());
        for l in 0..self.led_count() {
            out.extend(self.single_led_from_spectrum(&spectrum, l).data);
        }
        Ok(out)
    }

    pub fn lowres_pixels(&self) -> usize {
        let (r, c) = self.lowres_shape();
        r * c
    }

    /// Incoherent weighted sum of single-LED images.
    pub fn forward_pattern(&self, object: &ComplexField, pattern: &LedPattern) -> Result<IntensityImage> {
        if pattern.len() != self.led_count() {
            return Err(Error::Shape(format!(
                "pattern has {} weights for {} active LEDs",
                pattern.len(),
                self.led_count()
            )));
        }
        pattern.check_physical()?;
        let spectrum = self.spectrum(object)?;
        let (lr, lc) = self.lowres_shape();
        let mut image = IntensityImage::zeros(lr, lc);
        for (l, &w) in pattern.weights.iter().enumerate() {
            if w == 0.0 {
                continue;
            }
            let single = self.single_led_from_spectrum(&spectrum, l);
            for (acc, v) in image.data.iter_mut().zip(single.data) {
                *acc += w * v;
            }
        }
        Ok(image)
    }

    /// Derivative of [`forward_pattern`](Self::forward_pattern) with respect to the LED weights.
    pub fn pattern_jacobian(&self, object: &ComplexField) -> Result<PatternJacobian> {
        let stack = self.led_stack(object)?;
        let pixels = self.lowres_pixels();
        let leds = self.led_count();
        let mut data = vec![0.0; pixels * leds];
        for l in 0..leds {
            for p in 0..pixels {
                data[p * leds + l] = stack[l * pixels + p];
            }
        }
        Ok(PatternJacobian { pixels, leds, data })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const LAMBDA: f64 = 630e-9;

    #[test]
    fn on_axis_led_has_zero_frequency() {
        let (ux, uy) = led_spatial_frequency([0.0, 0.0, 25e-3], LAMBDA).unwrap();
        assert_eq!((ux, uy), (0.0, 0.0));
    }

    #[test]
    fn off_axis_led_frequency_by_hand() {
        // r = sqrt(12^2 + 8^2 + 25^2) mm = 28.862 mm
        let (ux, uy) = led_spatial_frequency([12e-3, 8e-3, 25e-3], LAMBDA).unwrap();
        assert!((ux - -6.600e5).abs() / 6.600e5 < 1e-3, "{ux}");
        assert!((uy - -4.400e5).abs() / 4.400e5 < 1e-3, "{uy}");
        assert!(ux.hypot(uy) < 1.0 / LAMBDA);
    }

    #[test]
    fn frequency_is_odd_in_lateral_position() {
        let a = led_spatial_frequency([3e-3, -7e-3, 10e-3], LAMBDA).unwrap();
        let b = led_spatial_frequency([-3e-3, 7e-3, 10e-3], LAMBDA).unwrap();
        assert_eq!(a.0, -b.0);
        assert_eq!(a.1, -b.1);
    }

    #[test]
    fn degenerate_led_position_is_rejected() {
        assert!(matches!(
            led_spatial_frequency([0.0, 0.0, 0.0], LAMBDA),
            Err(Error::InvalidGeometry(_))
        ));
        assert!(led_spatial_frequency([0.0, 0.0, 1.0], 0.0).is_err());
    }

    #[test]
    fn preset_synthetic_na() {
        assert!((synthetic_na(&Preset::Table1.config()) - 0.80).abs() < 0.005);
        assert!((synthetic_na(&Preset::Table2.config()) - 0.28).abs() < 0.005);
        // Geometry gives 0.8 + 11.31/15.10; the published 1.29 does not follow from it.
        let t3 = synthetic_na(&Preset::Table3.config());
        assert!((t3 - 1.5490).abs() < 1e-3, "{t3}");
    }

    #[test]
    fn single_on_axis_led_synthetic_na_is_objective_na() {
        let mut config = Preset::Table3.config();
        config.active_led_mask = LedMask::try_from(vec!["000".into(), "010".into(), "000".into()]).unwrap();
        assert_eq!(synthetic_na(&config), config.objective_na);
    }

    #[test]
    fn preset_led_counts_and_shapes() {
        let t1 = Preset::Table1.config();
        assert_eq!(t1.active_led_count(), 45);
        assert_eq!(t1.downsample_factor(), 4);
        assert_eq!(t1.lowres_shape(), (8, 8));
        let t2 = Preset::Table2.config();
        assert_eq!(t2.active_led_count(), 69);
        assert_eq!(t2.downsample_factor(), 2);
        let t3 = Preset::Table3.config();
        assert_eq!(t3.active_led_count(), 9);
        assert_eq!(t3.lowres_shape(), (1, 1));
    }

    #[test]
    fn non_integral_downsampling_is_rejected() {
        let mut config = Preset::Table1.config();
        config.sensor_pixel = 6.0e-6;
        assert!(matches!(config.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn invalid_na_is_rejected() {
        let mut config = Preset::Table1.config();
        config.objective_na = 1.2;
        assert!(config.validate().is_err());
        config.objective_na = 0.0;
        assert!(config.validate().is_err());
    }

    #[test]
    fn preset_toml_round_trip() {
        for preset in Preset::ALL {
            let config = preset.config();
            let text = config.to_toml_string();
            assert_eq!(OpticalConfig::from_toml_str(&text).unwrap(), config);
            assert_eq!(preset.id().parse::<Preset>().unwrap(), preset);
        }
    }

    #[test]
    fn pupil_cutoff_and_support() {
        let config = Preset::Table1.config();
        let pupil = pupil_mask(&config, (32, 32));
        assert!((pupil.cutoff - 4.7619e5).abs() < 1e2);
        assert!(pupil.passes(0, 0));
        let du = 1.0 / config.object_extent;
        for r in 0..32 {
            for c in 0..32 {
                let u = du * (signed_bin(r, 32) as f64).hypot(signed_bin(c, 32) as f64);
                assert_eq!(pupil.passes(r, c), u <= pupil.cutoff);
            }
        }
    }

    #[test]
    fn pupil_is_idempotent() {
        let config = Preset::Table1.config();
        let pupil = pupil_mask(&config, (32, 32));
        let mut field = ComplexField::from_fn(32, 32, 1.0, |r, c| {
            Complex64::new((r as f64).sin(), (c as f64 * 0.3).cos())
        });
        pupil.apply(&mut field);
        let once = field.clone();
        pupil.apply(&mut field);
        assert_eq!(once, field);
    }

    #[test]
    fn uniform_object_on_axis_gives_unit_image() {
        let mut config = Preset::Table1.config();
        config.active_led_mask = LedMask::try_from(
            ["0000000", "0000000", "0000000", "0001000", "0000000", "0000000", "0000000"]
                .map(String::from)
                .to_vec(),
        )
        .unwrap();
        let model = ForwardModel::new(&config).unwrap();
        let object = ComplexField::constant(32, 32, config.highres_pitch(), Complex64::new(1.0, 0.0));
        let image = model.forward_single_led(&object, 0).unwrap();
        assert_eq!((image.rows, image.cols), (8, 8));
        for v in image.data {
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_object_darkfield_led_is_dark() {
        let config = Preset::Table1.config();
        let model = ForwardModel::new(&config).unwrap();
        let object = ComplexField::constant(32, 32, config.highres_pitch(), Complex64::new(1.0, 0.0));
        let du = 1.0 / config.object_extent;
        let cutoff = config.objective_na / config.wavelength;
        let mut darkfield = 0;
        for (l, &[x, y, z]) in model.geometry().positions.iter().enumerate() {
            let r = x.hypot(y);
            let (sx, sy) = model.shifts()[l];
            // Bright/dark is decided by the rounded shift, which can differ from
            // sin(theta) > NA for LEDs just outside the acceptance cone.
            let shifted_out = du * (sx as f64).hypot(sy as f64) > cutoff;
            let image = model.forward_single_led(&object, l).unwrap();
            if shifted_out {
                assert!(r / (r * r + z * z).sqrt() > config.objective_na);
                darkfield += 1;
                assert!(image.data.iter().all(|&v| v.abs() < 1e-20), "LED {l}");
            } else {
                assert!(image.data.iter().all(|&v| (v - 1.0).abs() < 1e-9), "LED {l}");
            }
        }
        assert!(darkfield >= 20, "{darkfield}");
    }

    #[test]
    fn out_of_band_shift_is_reported() {
        let mut config = Preset::Table1.config();
        config.object_extent = 32e-6;
        config.sensor_pixel = 40e-6;
        assert!(matches!(ForwardModel::new(&config), Err(Error::OutOfBand { .. })));
    }

    #[test]
    fn pattern_is_linear_and_one_hot_matches_single_led() {
        let config = Preset::Table3.config();
        let model = ForwardModel::new(&config).unwrap();
        let object = ComplexField::from_fn(4, 4, config.highres_pitch(), |r, c| {
            Complex64::from_polar(1.0, -0.3 * (r * 4 + c) as f64)
        });
        let zero = model.forward_pattern(&object, &LedPattern::uniform(9, 0.0)).unwrap();
        assert!(zero.data.iter().all(|&v| v == 0.0));
        for j in 0..9 {
            let a = model.forward_pattern(&object, &LedPattern::one_hot(9, j)).unwrap();
            let b = model.forward_single_led(&object, j).unwrap();
            assert_eq!(a, b);
        }
        let c = LedPattern::new((0..9).map(|i| 0.05 * i as f64).collect());
        let c2 = LedPattern::new(c.weights.iter().map(|w| 2.0 * w).collect());
        let a = model.forward_pattern(&object, &c).unwrap();
        let b = model.forward_pattern(&object, &c2).unwrap();
        for (x, y) in a.data.iter().zip(&b.data) {
            assert!((2.0 * x - y).abs() <= 1e-12 * y.abs().max(1e-300));
        }
    }

    #[test]
    fn negative_weight_is_a_constraint_violation() {
        let config = Preset::Table3.config();
        let model = ForwardModel::new(&config).unwrap();
        let object = ComplexField::constant(4, 4, config.highres_pitch(), Complex64::new(1.0, 0.0));
        let mut pattern = LedPattern::uniform(9, 0.5);
        pattern.weights[3] = -0.1;
        assert!(matches!(
            model.forward_pattern(&object, &pattern),
            Err(Error::ConstraintViolation(_))
        ));
        assert!(matches!(
            model.forward_pattern(&object, &LedPattern::uniform(8, 0.5)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn jacobian_reproduces_pattern() {
        let config = Preset::Table1.config();
        let model = ForwardModel::new(&config).unwrap();
        let object = ComplexField::from_fn(32, 32, config.highres_pitch(), |r, c| {
            Complex64::from_polar(1.0, -((r * c) as f64 * 0.01))
        });
        let jac = model.pattern_jacobian(&object).unwrap();
        let pattern = LedPattern::new((0..45).map(|i| ((i * 7) % 11) as f64 / 10.0).collect());
        let direct = model.forward_pattern(&object, &pattern).unwrap();
        for (a, b) in jac.apply(&pattern.weights).iter().zip(&direct.data) {
            assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-12));
        }
        assert_eq!(jac.column(5), model.forward_single_led(&object, 5).unwrap().data);
    }

    #[test]
    fn block_mean_averages_blocks() {
        let data: Vec<f64> = (0..16).map(|v| v as f64).collect();
        assert_eq!(block_mean(&data, 4, 4, 2), vec![2.5, 4.5, 10.5, 12.5]);
        assert_eq!(block_mean(&data, 4, 4, 4), vec![7.5]);
    }
}
