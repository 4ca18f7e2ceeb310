//! Dense numeric kernels shared by the graph primitives.

/// `c = alpha * op(a) * op(b) + beta * c` for row-major operands, where
/// `op(a)` is `m x k` and `op(b)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the strides can reach.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a stride-1 "same" convolution with an odd kernel.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub channels: usize,
    pub rows: usize,
    pub cols: usize,
    pub kernel_rows: usize,
    pub kernel_cols: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.channels * self.kernel_rows * self.kernel_cols
    }

    pub fn pixels(&self) -> usize {
        self.rows * self.cols
    }
}

/// Unfolds one `channels x rows x cols` image into a `patch_len x pixels`
/// matrix with zero padding.
pub fn im2col(g: &ConvGeometry, image: &[f64], cols_out: &mut [f64]) {
    let (pr, pc) = (g.kernel_rows as isize / 2, g.kernel_cols as isize / 2);
    let px = g.pixels();
    let mut row = 0;
    for ch in 0..g.channels {
        let plane = &image[ch * px..(ch + 1) * px];
        for ki in 0..g.kernel_rows as isize {
            for kj in 0..g.kernel_cols as isize {
                let dst = &mut cols_out[row * px..(row + 1) * px];
                for r in 0..g.rows as isize {
                    let sr = r + ki - pr;
                    let out = &mut dst[r as usize * g.cols..(r as usize + 1) * g.cols];
                    if sr < 0 || sr >= g.rows as isize {
                        out.fill(0.0);
                        continue;
                    }
                    let src = &plane[sr as usize * g.cols..(sr as usize + 1) * g.cols];
                    for c in 0..g.cols as isize {
                        let sc = c + kj - pc;
                        out[c as usize] = if sc < 0 || sc >= g.cols as isize {
                            0.0
                        } else {
                            src[sc as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: accumulates a patch matrix back into an image.
pub fn col2im(g: &ConvGeometry, cols_in: &[f64], image: &mut [f64]) {
    let (pr, pc) = (g.kernel_rows as isize / 2, g.kernel_cols as isize / 2);
    let px = g.pixels();
    let mut row = 0;
    for ch in 0..g.channels {
        let plane = &mut image[ch * px..(ch + 1) * px];
        for ki in 0..g.kernel_rows as isize {
            for kj in 0..g.kernel_cols as isize {
                let src = &cols_in[row * px..(row + 1) * px];
                for r in 0..g.rows as isize {
                    let sr = r + ki - pr;
                    if sr < 0 || sr >= g.rows as isize {
                        continue;
                    }
                    let from = &src[r as usize * g.cols..(r as usize + 1) * g.cols];
                    let to = &mut plane[sr as usize * g.cols..(sr as usize + 1) * g.cols];
                    for c in 0..g.cols as isize {
                        let sc = c + kj - pc;
                        if sc >= 0 && sc < g.cols as isize {
                            to[sc as usize] += from[c as usize];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// `ln(1 + e^z)` without overflow.
pub fn softplus(z: f64) -> f64 {
    z.max(0.0) + (-z.abs()).exp().ln_1p()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}
