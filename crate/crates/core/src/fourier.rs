//! Unitary 2-D discrete Fourier transforms on row-major complex grids.
//!
//! Both directions carry a `1/sqrt(rows * cols)` factor, so the transform is
//! unitary and its adjoint is the inverse transform.

use std::fmt;
use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

/// Signed frequency index for DFT bin `j` of an `n`-point transform
/// (`0, 1, .., ceil(n/2) - 1, -floor(n/2), .., -1`).
pub fn signed_bin(j: usize, n: usize) -> isize {
    if j < n.div_ceil(2) {
        j as isize
    } else {
        j as isize - n as isize
    }
}

/// Inverse of [`signed_bin`]: storage index of signed frequency `k`, or `None`
/// when `k` is outside the representable range.
pub fn bin_index(k: isize, n: usize) -> Option<usize> {
    let lo = -((n / 2) as isize);
    let hi = n.div_ceil(2) as isize - 1;
    if k < lo || k > hi {
        None
    } else if k >= 0 {
        Some(k as usize)
    } else {
        Some((k + n as isize) as usize)
    }
}

/// Planned forward/inverse transforms for one grid shape.
#[derive(Clone)]
pub struct Fourier2d {
    rows: usize,
    cols: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
    scale: f64,
}

impl fmt::Debug for Fourier2d {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Fourier2d")
            .field("rows", &self.rows)
            .field("cols", &self.cols)
            .finish()
    }
}

impl Fourier2d {
    pub fn new(rows: usize, cols: usize) -> Self {
        assert!(rows > 0 && cols > 0, "empty transform grid");
        let mut planner = FftPlanner::new();
        Self {
            rows,
            cols,
            row_fwd: planner.plan_fft_forward(cols),
            row_inv: planner.plan_fft_inverse(cols),
            col_fwd: planner.plan_fft_forward(rows),
            col_inv: planner.plan_fft_inverse(rows),
            scale: 1.0 / ((rows * cols) as f64).sqrt(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn forward(&self, data: &mut [Complex64]) {
        self.run(data, false);
    }

    pub fn inverse(&self, data: &mut [Complex64]) {
        self.run(data, true);
    }

    /// Transforms split real/imaginary planes in place.
    pub fn transform_planes(&self, re: &mut [f64], im: &mut [f64], inverse: bool) {
        let mut buf: Vec<Complex64> = re
            .iter()
            .zip(im.iter())
            .map(|(&r, &i)| Complex64::new(r, i))
            .collect();
        self.run(&mut buf, inverse);
        for ((r, i), c) in re.iter_mut().zip(im.iter_mut()).zip(&buf) {
            *r = c.re;
            *i = c.im;
        }
    }

    fn run(&self, data: &mut [Complex64], inverse: bool) {
        assert_eq!(data.len(), self.rows * self.cols, "grid size mismatch");
        let (row_fft, col_fft) = if inverse {
            (&self.row_inv, &self.col_inv)
        } else {
            (&self.row_fwd, &self.col_fwd)
        };
        for row in data.chunks_exact_mut(self.cols) {
            row_fft.process(row);
        }
        let mut column = vec![Complex64::new(0.0, 0.0); self.rows];
        for c in 0..self.cols {
            for r in 0..self.rows {
                column[r] = data[r * self.cols + c];
            }
            col_fft.process(&mut column);
            for r in 0..self.rows {
                data[r * self.cols + c] = column[r];
            }
        }
        for v in data.iter_mut() {
            *v *= self.scale;
        }
    }
}
