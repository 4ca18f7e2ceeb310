use std::collections::HashMap;

use rand::Rng as _;

use super::kernels::{col2im, gemm, im2col, sigmoid, softplus, ConvGeometry};
use super::{ParamId, ParamStore, Tensor};
use crate::channel;
use crate::error::{Error, Result};
use crate::fourier::Fourier2d;
use crate::rng::Rng;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Per-channel statistics of one training-mode batch-norm evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Square(Var),
    Sum(Var),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    AddChannelBias {
        x: Var,
        bias: Var,
    },
    Conv2d {
        x: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
        out_channels: usize,
    },
    ChannelMax {
        x: Var,
        second: Vec<bool>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    Dropout {
        x: Var,
        mask: Vec<f64>,
    },
    ModulusSquared(Var),
    BlockMean {
        x: Var,
        k: usize,
    },
    Fft2 {
        x: Var,
        inverse: bool,
    },
    Roll {
        x: Var,
        dy: isize,
        dx: isize,
    },
    Diff {
        x: Var,
        vertical: bool,
    },
    Upsample {
        x: Var,
        k: usize,
    },
    PadAdd {
        small: Var,
        big: Var,
    },
    Concat(Var, Var),
    GlobalMeanPool(Var),
    Softplus(Var),
    ChannelCombine {
        stack: Var,
        weights: Var,
    },
    ShotNoise {
        x: Var,
        slope: Vec<f64>,
    },
    Reshape(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    param: Option<ParamId>,
}

/// A recorded computation. Nodes are appended in evaluation order, so the
/// record is always topologically sorted.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    fourier: HashMap<(usize, usize), Fourier2d>,
}

/// Gradients of a scalar output with respect to every node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    /// Gradient of `v`, zeros when `v` does not influence the output.
    pub fn wrt(&self, graph: &Graph, v: Var) -> Vec<f64> {
        self.get(v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; graph.value(v).len()])
    }
}

fn shape_err(msg: impl Into<String>) -> Error {
    Error::Shape(msg.into())
}

/// `(batch, channels, spatial)` view of a tensor of rank >= 2.
fn channel_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(format!("{what}: expected rank >= 2, got {shape:?}")));
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [b, c, h, w] => Ok((b, c, h, w)),
        _ => Err(shape_err(format!("{what}: expected [B, C, H, W], got {shape:?}"))),
    }
}

/// Last two dimensions and the number of planes before them.
fn plane_dims(shape: &[usize], what: &str) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(shape_err(format!("{what}: expected rank >= 2, got {shape:?}")));
    }
    let n = shape.len();
    Ok((shape[..n - 2].iter().product(), shape[n - 2], shape[n - 1]))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node {
            value,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn make(&mut self, shape: &[usize], data: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(Tensor::new(shape, data).expect("kernel produced matching shape"), op)
    }

    pub fn constant(&mut self, mut tensor: Tensor) -> Var {
        tensor.grad = None;
        self.push(tensor, Op::Leaf)
    }

    /// Leaf holding a copy of a stored parameter; its gradient can be written
    /// back with [`write_param_grads`](Self::write_param_grads).
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.constant(store.get(id).clone());
        self.nodes[v.0].param = Some(id);
        v
    }

    fn fourier(&mut self, rows: usize, cols: usize) -> Fourier2d {
        self.fourier
            .entry((rows, cols))
            .or_insert_with(|| Fourier2d::new(rows, cols))
            .clone()
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.make(&shape, data, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        self.make(&shape, data, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.map(a, Op::Scale(a, s), |x| s * x)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.map(a, Op::Square(a), |x| x * x)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.map(a, Op::Softplus(a), softplus)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        self.make(&[1], vec![s], Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(t, Op::Reshape(a)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k, k2, n) = match (self.shape(a), self.shape(b)) {
            (&[m, k], &[k2, n]) => (m, k, k2, n),
            (sa, sb) => return Err(shape_err(format!("matmul: {sa:?} x {sb:?}"))),
        };
        if k != k2 {
            return Err(shape_err(format!("matmul: inner dims {k} vs {k2}")));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.data(a), false, self.data(b), false, 0.0, &mut out);
        Ok(self.make(&[m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    /// Adds `bias[c]` to every element of channel `c` of `x: [B, C, ...]`.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (b, c, s) = channel_dims(self.shape(x), "add_channel_bias")?;
        if self.shape(bias) != [c] {
            return Err(shape_err(format!(
                "add_channel_bias: bias {:?} for {c} channels",
                self.shape(bias)
            )));
        }
        let mut out = self.data(x).to_vec();
        let bv = self.data(bias);
        for bi in 0..b {
            for ci in 0..c {
                for v in &mut out[(bi * c + ci) * s..(bi * c + ci + 1) * s] {
                    *v += bv[ci];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.make(&shape, out, Op::AddChannelBias { x, bias }))
    }

    /// Stride-1 convolution with zero "same" padding.
    /// `x: [B, Ci, H, W]`, `weight: [Co, Ci, kh, kw]` (odd `kh`, `kw`), `bias: [Co]`.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let (b, ci, h, w) = dims4(self.shape(x), "conv2d input")?;
        let (co, wci, kh, kw) = dims4(self.shape(weight), "conv2d weight")?;
        if wci != ci {
            return Err(shape_err(format!(
                "conv2d: weight expects {wci} input channels, input has {ci}"
            )));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(shape_err(format!("conv2d: kernel {kh}x{kw} must be odd")));
        }
        if let Some(bias) = bias {
            if self.shape(bias) != [co] {
                return Err(shape_err(format!(
                    "conv2d: bias {:?} for {co} output channels",
                    self.shape(bias)
                )));
            }
        }
        let geom = ConvGeometry {
            channels: ci,
            rows: h,
            cols: w,
            kernel_rows: kh,
            kernel_cols: kw,
        };
        let (kl, px) = (geom.patch_len(), geom.pixels());
        // One patch matrix at a time; the backward pass rebuilds it.
        let mut col = vec![0.0; kl * px];
        let mut out = vec![0.0; b * co * px];
        {
            let xd = self.data(x);
            let wd = self.data(weight);
            for bi in 0..b {
                im2col(&geom, &xd[bi * ci * px..(bi + 1) * ci * px], &mut col);
                gemm(co, kl, px, 1.0, wd, false, &col, false, 0.0, &mut out[bi * co * px..(bi + 1) * co * px]);
            }
            if let Some(bias) = bias {
                let bv = self.data(bias);
                for bi in 0..b {
                    for o in 0..co {
                        for v in &mut out[(bi * co + o) * px..(bi * co + o + 1) * px] {
                            *v += bv[o];
                        }
                    }
                }
            }
        }
        Ok(self.make(
            &[b, co, h, w],
            out,
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                out_channels: co,
            },
        ))
    }

    /// Maxout over adjacent channel pairs: `[B, 2C, ...] -> [B, C, ...]`.
    /// Ties resolve to the lower channel.
    pub fn channel_max(&mut self, x: Var) -> Result<Var> {
        let (b, c, s) = channel_dims(self.shape(x), "channel_max")?;
        if c % 2 != 0 {
            return Err(shape_err(format!("channel_max: odd channel count {c}")));
        }
        let half = c / 2;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(b * half * s);
        let mut second = Vec::with_capacity(b * half * s);
        for bi in 0..b {
            for j in 0..half {
                let lo = &xd[(bi * c + 2 * j) * s..(bi * c + 2 * j + 1) * s];
                let hi = &xd[(bi * c + 2 * j + 1) * s..(bi * c + 2 * j + 2) * s];
                for (&p, &q) in lo.iter().zip(hi) {
                    let take_hi = q > p;
                    second.push(take_hi);
                    out.push(if take_hi { q } else { p });
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = half;
        Ok(self.make(&shape, out, Op::ChannelMax { x, second }))
    }

    fn check_norm_params(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let dims = channel_dims(self.shape(x), "batch_norm")?;
        if self.shape(gamma) != [dims.1] || self.shape(beta) != [dims.1] {
            return Err(shape_err(format!(
                "batch_norm: gamma {:?} / beta {:?} for {} channels",
                self.shape(gamma),
                self.shape(beta),
                dims.1
            )));
        }
        Ok(dims)
    }

    fn normalize(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        batch_stats: bool,
        (b, c, s): (usize, usize, usize),
    ) -> Var {
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let mut out = vec![0.0; xd.len()];
        for bi in 0..b {
            for ci in 0..c {
                let range = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                for i in range {
                    out[i] = gd[ci] * (xd[i] - mean[ci]) * inv_std[ci] + bd[ci];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        self.make(
            &shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean: mean.to_vec(),
                inv_std,
                batch_stats,
            },
        )
    }

    /// Training-mode batch normalization over all axes except the channel axis.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, BatchStats)> {
        let (b, c, s) = self.check_norm_params(x, gamma, beta)?;
        let n = (b * s) as f64;
        let xd = self.data(x);
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for bi in 0..b {
            for ci in 0..c {
                mean[ci] += xd[(bi * c + ci) * s..(bi * c + ci + 1) * s].iter().sum::<f64>();
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        for bi in 0..b {
            for ci in 0..c {
                var[ci] += xd[(bi * c + ci) * s..(bi * c + ci + 1) * s]
                    .iter()
                    .map(|v| (v - mean[ci]).powi(2))
                    .sum::<f64>();
            }
        }
        for v in &mut var {
            *v /= n;
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let out = self.normalize(x, gamma, beta, &mean, inv_std, true, (b, c, s));
        Ok((out, BatchStats { mean, var }))
    }

    /// Inference-mode batch normalization with fixed statistics.
    pub fn batch_norm_inference(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let dims = self.check_norm_params(x, gamma, beta)?;
        if mean.len() != dims.1 || var.len() != dims.1 {
            return Err(shape_err("batch_norm_inference: statistics length"));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        Ok(self.normalize(x, gamma, beta, mean, inv_std, false, dims))
    }

    /// Inverted dropout: surviving elements are scaled by `1 / (1 - rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate {rate} outside [0, 1)")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.value(x).len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        let data = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.make(&shape, data, Op::Dropout { x, mask }))
    }

    /// `[B, 2, ...]` real/imaginary planes to `[B, 1, ...]` squared modulus.
    pub fn modulus_squared(&mut self, x: Var) -> Result<Var> {
        let (b, c, s) = channel_dims(self.shape(x), "modulus_squared")?;
        if c != 2 {
            return Err(shape_err("modulus_squared: expected 2 channels (re, im)"));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(b * s);
        for bi in 0..b {
            let (re, im) = (&xd[2 * bi * s..(2 * bi + 1) * s], &xd[(2 * bi + 1) * s..(2 * bi + 2) * s]);
            out.extend(re.iter().zip(im).map(|(r, i)| r * r + i * i));
        }
        let mut shape = self.shape(x).to_vec();
        shape[1] = 1;
        Ok(self.make(&shape, out, Op::ModulusSquared(x)))
    }

    /// `k x k` block mean over the last two axes.
    pub fn block_mean(&mut self, x: Var, k: usize) -> Result<Var> {
        let (p, h, w) = plane_dims(self.shape(x), "block_mean")?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(shape_err(format!("block_mean: {h}x{w} not divisible by {k}")));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(p * h * w / (k * k));
        for pi in 0..p {
            out.extend(crate::optics::block_mean(&xd[pi * h * w..(pi + 1) * h * w], h, w, k));
        }
        let mut shape = self.shape(x).to_vec();
        let n = shape.len();
        shape[n - 2] = h / k;
        shape[n - 1] = w / k;
        Ok(self.make(&shape, out, Op::BlockMean { x, k }))
    }

    fn transform(&mut self, x: Var, inverse: bool) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x), "fft2")?;
        if c != 2 {
            return Err(shape_err("fft2: expected 2 channels (re, im)"));
        }
        let fourier = self.fourier(h, w);
        let mut out = self.data(x).to_vec();
        transform_batch(&fourier, &mut out, b, h * w, inverse);
        let shape = self.shape(x).to_vec();
        Ok(self.make(&shape, out, Op::Fft2 { x, inverse }))
    }

    /// Unitary 2-D DFT of `[B, 2, H, W]` real/imaginary planes.
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        self.transform(x, false)
    }

    pub fn ifft2(&mut self, x: Var) -> Result<Var> {
        self.transform(x, true)
    }

    /// Circular shift of the last two axes: `y[i, j] = x[i - dy, j - dx]`.
    pub fn roll(&mut self, x: Var, dy: isize, dx: isize) -> Result<Var> {
        let (p, h, w) = plane_dims(self.shape(x), "roll")?;
        let out = roll_planes(self.data(x), p, h, w, dy, dx);
        let shape = self.shape(x).to_vec();
        Ok(self.make(&shape, out, Op::Roll { x, dy, dx }))
    }

    /// Forward difference `x[i + 1] - x[i]` along rows (`vertical`) or columns,
    /// over the valid region only.
    pub fn diff(&mut self, x: Var, vertical: bool) -> Result<Var> {
        let (p, h, w) = plane_dims(self.shape(x), "diff")?;
        let (oh, ow) = if vertical { (h.saturating_sub(1), w) } else { (h, w.saturating_sub(1)) };
        if oh == 0 || ow == 0 {
            return Err(shape_err(format!("diff: {h}x{w} too small")));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(p * oh * ow);
        for pi in 0..p {
            let plane = &xd[pi * h * w..(pi + 1) * h * w];
            for r in 0..oh {
                for c in 0..ow {
                    let next = if vertical { plane[(r + 1) * w + c] } else { plane[r * w + c + 1] };
                    out.push(next - plane[r * w + c]);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        Ok(self.make(&shape, out, Op::Diff { x, vertical }))
    }

    /// Nearest-neighbor upsampling of the last two axes by `k`.
    pub fn upsample(&mut self, x: Var, k: usize) -> Result<Var> {
        let (p, h, w) = plane_dims(self.shape(x), "upsample")?;
        if k == 0 {
            return Err(shape_err("upsample: factor 0"));
        }
        let xd = self.data(x);
        let (oh, ow) = (h * k, w * k);
        let mut out = Vec::with_capacity(p * oh * ow);
        for pi in 0..p {
            let plane = &xd[pi * h * w..(pi + 1) * h * w];
            for r in 0..oh {
                for c in 0..ow {
                    out.push(plane[(r / k) * w + c / k]);
                }
            }
        }
        let mut shape = self.shape(x).to_vec();
        let n = shape.len();
        shape[n - 2] = oh;
        shape[n - 1] = ow;
        Ok(self.make(&shape, out, Op::Upsample { x, k }))
    }

    /// Residual merge: `big` plus `small` zero-padded along the channel axis.
    pub fn pad_add(&mut self, small: Var, big: Var) -> Result<Var> {
        let (bs, cs, ss) = channel_dims(self.shape(small), "pad_add")?;
        let (bb, cb, sb) = channel_dims(self.shape(big), "pad_add")?;
        if bs != bb || ss != sb || cs > cb || self.shape(small)[2..] != self.shape(big)[2..] {
            return Err(shape_err(format!(
                "pad_add: {:?} into {:?}",
                self.shape(small),
                self.shape(big)
            )));
        }
        let mut out = self.data(big).to_vec();
        let sd = self.data(small);
        for bi in 0..bb {
            for ci in 0..cs {
                let src = &sd[(bi * cs + ci) * ss..(bi * cs + ci + 1) * ss];
                let dst = &mut out[(bi * cb + ci) * sb..(bi * cb + ci + 1) * sb];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let shape = self.shape(big).to_vec();
        Ok(self.make(&shape, out, Op::PadAdd { small, big }))
    }

    /// Concatenation along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, sa) = channel_dims(self.shape(a), "concat_channels")?;
        let (bb, cb, sb) = channel_dims(self.shape(b), "concat_channels")?;
        if ba != bb || sa != sb || self.shape(a)[2..] != self.shape(b)[2..] {
            return Err(shape_err(format!(
                "concat_channels: {:?} with {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = Vec::with_capacity(ad.len() + bd.len());
        for bi in 0..ba {
            out.extend_from_slice(&ad[bi * ca * sa..(bi + 1) * ca * sa]);
            out.extend_from_slice(&bd[bi * cb * sb..(bi + 1) * cb * sb]);
        }
        let mut shape = self.shape(a).to_vec();
        shape[1] = ca + cb;
        Ok(self.make(&shape, out, Op::Concat(a, b)))
    }

    /// `[B, C, ...] -> [B, C]` mean over the trailing axes.
    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, s) = channel_dims(self.shape(x), "global_mean_pool")?;
        let out = self
            .data(x)
            .chunks_exact(s)
            .map(|ch| ch.iter().sum::<f64>() / s as f64)
            .collect();
        Ok(self.make(&[b, c], out, Op::GlobalMeanPool(x)))
    }

    /// `[B, L, ...]` stack weighted by `weights: [L]` into `[B, 1, ...]`.
    pub fn channel_combine(&mut self, stack: Var, weights: Var) -> Result<Var> {
        let (b, l, s) = channel_dims(self.shape(stack), "channel_combine")?;
        if self.shape(weights) != [l] {
            return Err(shape_err(format!(
                "channel_combine: {:?} weights for {l} channels",
                self.shape(weights)
            )));
        }
        let mut out = vec![0.0; b * s];
        let (sd, wd) = (self.data(stack), self.data(weights));
        for bi in 0..b {
            let acc = &mut out[bi * s..(bi + 1) * s];
            for (li, &wl) in wd.iter().enumerate() {
                let plane = &sd[(bi * l + li) * s..(bi * l + li + 1) * s];
                for (a, v) in acc.iter_mut().zip(plane) {
                    *a += wl * v;
                }
            }
        }
        let mut shape = self.shape(stack).to_vec();
        shape[1] = 1;
        Ok(self.make(&shape, out, Op::ChannelCombine { stack, weights }))
    }

    /// Gaussian shot-noise channel with fixed standard-normal draws `g`.
    /// See [`crate::channel`] for the value and derivative.
    pub fn shot_noise(&mut self, x: Var, g: &[f64], m: f64) -> Result<Var> {
        if g.len() != self.value(x).len() {
            return Err(shape_err(format!(
                "shot_noise: {} draws for {} pixels",
                g.len(),
                self.value(x).len()
            )));
        }
        let xd = self.data(x);
        let mut out = Vec::with_capacity(xd.len());
        let mut slope = Vec::with_capacity(xd.len());
        for (&i, &gi) in xd.iter().zip(g) {
            out.push(channel::noisy_pixel(i, gi, m));
            slope.push(channel::noisy_pixel_derivative(i, gi, m));
        }
        let shape = self.shape(x).to_vec();
        Ok(self.make(&shape, out, Op::ShotNoise { x, slope }))
    }

    /// Reverse sweep from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        if self.value(output).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    /// Sums `grads` of every parameter leaf into the matching stored tensor's
    /// `grad`. Parameters that did not reach the output receive zeros.
    pub fn write_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        let mut seen = vec![false; store.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let Some(id) = node.param else { continue };
            let t = store.get_mut(id);
            if !seen[id.0] {
                t.grad = Some(vec![0.0; t.len()]);
                seen[id.0] = true;
            }
            if let Some(g) = grads.get(Var(i)) {
                for (acc, v) in t.grad.as_mut().unwrap().iter_mut().zip(g) {
                    *acc += v;
                }
            }
        }
        for id in store.ids().collect::<Vec<_>>() {
            if !seen[id.0] {
                let t = store.get_mut(id);
                t.grad = Some(vec![0.0; t.len()]);
            }
        }
    }

    fn propagate(&self, i: usize, gy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_into(grads, *a, gy, |g| g);
                add_into(grads, *b, gy, |g| g);
            }
            Op::Sub(a, b) => {
                add_into(grads, *a, gy, |g| g);
                add_into(grads, *b, gy, |g| -g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.data(*a), self.data(*b));
                let ga: Vec<f64> = gy.iter().zip(bv).map(|(g, v)| g * v).collect();
                let gb: Vec<f64> = gy.iter().zip(av).map(|(g, v)| g * v).collect();
                add_into(grads, *a, &ga, |g| g);
                add_into(grads, *b, &gb, |g| g);
            }
            Op::Scale(a, s) => add_into(grads, *a, gy, |g| s * g),
            Op::Square(a) => {
                let g: Vec<f64> = gy.iter().zip(self.data(*a)).map(|(g, x)| 2.0 * x * g).collect();
                add_into(grads, *a, &g, |g| g);
            }
            Op::Softplus(a) => {
                let g: Vec<f64> = gy.iter().zip(self.data(*a)).map(|(g, &z)| g * sigmoid(z)).collect();
                add_into(grads, *a, &g, |g| g);
            }
            Op::Sum(a) => {
                let g = vec![gy[0]; self.value(*a).len()];
                add_into(grads, *a, &g, |g| g);
            }
            Op::Reshape(a) => add_into(grads, *a, gy, |g| g),
            Op::MatMul { a, b, m, k, n } => {
                let mut ga = vec![0.0; m * k];
                gemm(*m, *n, *k, 1.0, gy, false, self.data(*b), true, 0.0, &mut ga);
                let mut gb = vec![0.0; k * n];
                gemm(*k, *m, *n, 1.0, self.data(*a), true, gy, false, 0.0, &mut gb);
                add_into(grads, *a, &ga, |g| g);
                add_into(grads, *b, &gb, |g| g);
            }
            Op::AddChannelBias { x, bias } => {
                add_into(grads, *x, gy, |g| g);
                let (b, c, s) = channel_dims(self.shape(*x), "").unwrap();
                let gb = channel_sums(gy, b, c, s);
                add_into(grads, *bias, &gb, |g| g);
            }
            Op::Conv2d {
                x,
                weight,
                bias,
                geom,
                out_channels,
            } => {
                let co = *out_channels;
                let (kl, px) = (geom.patch_len(), geom.pixels());
                let b = self.shape(*x)[0];
                let wd = self.data(*weight);
                let mut gw = vec![0.0; co * kl];
                let mut gx = vec![0.0; b * geom.channels * px];
                let mut gcol = vec![0.0; kl * px];
                let mut col = vec![0.0; kl * px];
                let xd = self.data(*x);
                let cpx = geom.channels * px;
                for bi in 0..b {
                    let gyb = &gy[bi * co * px..(bi + 1) * co * px];
                    im2col(geom, &xd[bi * cpx..(bi + 1) * cpx], &mut col);
                    gemm(co, px, kl, 1.0, gyb, false, &col, true, 1.0, &mut gw);
                    gemm(kl, co, px, 1.0, wd, true, gyb, false, 0.0, &mut gcol);
                    col2im(geom, &gcol, &mut gx[bi * geom.channels * px..(bi + 1) * geom.channels * px]);
                }
                add_into(grads, *x, &gx, |g| g);
                add_into(grads, *weight, &gw, |g| g);
                if let Some(bias) = bias {
                    let gb = channel_sums(gy, b, co, px);
                    add_into(grads, *bias, &gb, |g| g);
                }
            }
            Op::ChannelMax { x, second } => {
                let (b, c, s) = channel_dims(self.shape(*x), "").unwrap();
                let half = c / 2;
                let mut gx = vec![0.0; b * c * s];
                for bi in 0..b {
                    for j in 0..half {
                        for p in 0..s {
                            let o = (bi * half + j) * s + p;
                            let ch = 2 * j + usize::from(second[o]);
                            gx[(bi * c + ch) * s + p] = gy[o];
                        }
                    }
                }
                add_into(grads, *x, &gx, |g| g);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                batch_stats,
            } => {
                let (b, c, s) = channel_dims(self.shape(*x), "").unwrap();
                let xd = self.data(*x);
                let xhat = |idx: usize, ci: usize| (xd[idx] - mean[ci]) * inv_std[ci];
                let gd = self.data(*gamma);
                let mut ggamma = vec![0.0; c];
                let mut gbeta = vec![0.0; c];
                let mut sum_dxhat = vec![0.0; c];
                let mut sum_dxhat_xhat = vec![0.0; c];
                for bi in 0..b {
                    for ci in 0..c {
                        for idx in (bi * c + ci) * s..(bi * c + ci + 1) * s {
                            let h = xhat(idx, ci);
                            ggamma[ci] += gy[idx] * h;
                            gbeta[ci] += gy[idx];
                            let dxh = gy[idx] * gd[ci];
                            sum_dxhat[ci] += dxh;
                            sum_dxhat_xhat[ci] += dxh * h;
                        }
                    }
                }
                let n = (b * s) as f64;
                let mut gx = vec![0.0; b * c * s];
                for bi in 0..b {
                    for ci in 0..c {
                        for idx in (bi * c + ci) * s..(bi * c + ci + 1) * s {
                            let dxh = gy[idx] * gd[ci];
                            gx[idx] = if *batch_stats {
                                inv_std[ci] / n
                                    * (n * dxh - sum_dxhat[ci] - xhat(idx, ci) * sum_dxhat_xhat[ci])
                            } else {
                                dxh * inv_std[ci]
                            };
                        }
                    }
                }
                add_into(grads, *x, &gx, |g| g);
                add_into(grads, *gamma, &ggamma, |g| g);
                add_into(grads, *beta, &gbeta, |g| g);
            }
            Op::Dropout { x, mask } => {
                let g: Vec<f64> = gy.iter().zip(mask).map(|(g, m)| g * m).collect();
                add_into(grads, *x, &g, |g| g);
            }
            Op::ModulusSquared(x) => {
                let (b, _, s) = channel_dims(self.shape(*x), "").unwrap();
                let xd = self.data(*x);
                let mut gx = vec![0.0; 2 * b * s];
                for bi in 0..b {
                    for p in 0..s {
                        let g = gy[bi * s + p];
                        gx[2 * bi * s + p] = 2.0 * xd[2 * bi * s + p] * g;
                        gx[(2 * bi + 1) * s + p] = 2.0 * xd[(2 * bi + 1) * s + p] * g;
                    }
                }
                add_into(grads, *x, &gx, |g| g);
            }
            Op::BlockMean { x, k } => {
                let (p, h, w) = plane_dims(self.shape(*x), "").unwrap();
                let (oh, ow) = (h / k, w / k);
                let norm = 1.0 / (k * k) as f64;
                let mut gx = vec![0.0; p * h * w];
                for pi in 0..p {
                    for r in 0..h {
                        for c in 0..w {
                            gx[pi * h * w + r * w + c] = gy[pi * oh * ow + (r / k) * ow + c / k] * norm;
                        }
                    }
                }
                add_into(grads, *x, &gx, |g| g);
            }
            Op::Fft2 { x, inverse } => {
                let (b, _, h, w) = dims4(self.shape(*x), "").unwrap();
                let fourier = self
                    .fourier
                    .get(&(h, w))
                    .cloned()
                    .unwrap_or_else(|| Fourier2d::new(h, w));
                let mut gx = gy.to_vec();
                // The transform is unitary, so its adjoint is the opposite direction.
                transform_batch(&fourier, &mut gx, b, h * w, !inverse);
                add_into(grads, *x, &gx, |g| g);
            }
            Op::Roll { x, dy, dx } => {
                let (p, h, w) = plane_dims(self.shape(*x), "").unwrap();
                let gx = roll_planes(gy, p, h, w, -dy, -dx);
                add_into(grads, *x, &gx, |g| g);
            }
            Op::Diff { x, vertical } => {
                let (p, h, w) = plane_dims(self.shape(*x), "").unwrap();
                let (oh, ow) = if *vertical { (h - 1, w) } else { (h, w - 1) };
                let mut gx = vec![0.0; p * h * w];
                for pi in 0..p {
                    let plane = &mut gx[pi * h * w..(pi + 1) * h * w];
                    for r in 0..oh {
                        for c in 0..ow {
                            let g = gy[pi * oh * ow + r * ow + c];
                            let next = if *vertical { (r + 1) * w + c } else { r * w + c + 1 };
                            plane[next] += g;
                            plane[r * w + c] -= g;
                        }
                    }
                }
                add_into(grads, *x, &gx, |g| g);
            }
            Op::Upsample { x, k } => {
                let (p, h, w) = plane_dims(self.shape(*x), "").unwrap();
                let (oh, ow) = (h * k, w * k);
                let mut gx = vec![0.0; p * h * w];
                for pi in 0..p {
                    for r in 0..oh {
                        for c in 0..ow {
                            gx[pi * h * w + (r / k) * w + c / k] += gy[pi * oh * ow + r * ow + c];
                        }
                    }
                }
                add_into(grads, *x, &gx, |g| g);
            }
            Op::PadAdd { small, big } => {
                add_into(grads, *big, gy, |g| g);
                let (bs, cs, ss) = channel_dims(self.shape(*small), "").unwrap();
                let cb = self.shape(*big)[1];
                let mut gs = Vec::with_capacity(bs * cs * ss);
                for bi in 0..bs {
                    gs.extend_from_slice(&gy[bi * cb * ss..(bi * cb + cs) * ss]);
                }
                add_into(grads, *small, &gs, |g| g);
            }
            Op::Concat(a, b) => {
                let (bn, ca, s) = channel_dims(self.shape(*a), "").unwrap();
                let cb = self.shape(*b)[1];
                let (mut ga, mut gb) = (Vec::new(), Vec::new());
                for bi in 0..bn {
                    let base = bi * (ca + cb) * s;
                    ga.extend_from_slice(&gy[base..base + ca * s]);
                    gb.extend_from_slice(&gy[base + ca * s..base + (ca + cb) * s]);
                }
                add_into(grads, *a, &ga, |g| g);
                add_into(grads, *b, &gb, |g| g);
            }
            Op::GlobalMeanPool(x) => {
                let (_, _, s) = channel_dims(self.shape(*x), "").unwrap();
                let gx: Vec<f64> = gy
                    .iter()
                    .flat_map(|&g| std::iter::repeat_n(g / s as f64, s))
                    .collect();
                add_into(grads, *x, &gx, |g| g);
            }
            Op::ChannelCombine { stack, weights } => {
                let (b, l, s) = channel_dims(self.shape(*stack), "").unwrap();
                let (sd, wd) = (self.data(*stack), self.data(*weights));
                let mut gs = vec![0.0; b * l * s];
                let mut gw = vec![0.0; l];
                for bi in 0..b {
                    let gyb = &gy[bi * s..(bi + 1) * s];
                    for li in 0..l {
                        let base = (bi * l + li) * s;
                        let mut acc = 0.0;
                        for p in 0..s {
                            gs[base + p] = wd[li] * gyb[p];
                            acc += sd[base + p] * gyb[p];
                        }
                        gw[li] += acc;
                    }
                }
                add_into(grads, *stack, &gs, |g| g);
                add_into(grads, *weights, &gw, |g| g);
            }
            Op::ShotNoise { x, slope } => {
                let g: Vec<f64> = gy.iter().zip(slope).map(|(g, s)| g * s).collect();
                add_into(grads, *x, &g, |g| g);
            }
        }
    }
}

fn add_into(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64], f: impl Fn(f64) -> f64) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, &x) in acc.iter_mut().zip(g) {
                *a += f(x);
            }
        }
        slot @ None => *slot = Some(g.iter().map(|&x| f(x)).collect()),
    }
}

fn channel_sums(g: &[f64], b: usize, c: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; c];
    for bi in 0..b {
        for (ci, o) in out.iter_mut().enumerate() {
            *o += g[(bi * c + ci) * s..(bi * c + ci + 1) * s].iter().sum::<f64>();
        }
    }
    out
}

fn transform_batch(fourier: &Fourier2d, data: &mut [f64], batch: usize, plane: usize, inverse: bool) {
    for bi in 0..batch {
        let (re, im) = data[2 * bi * plane..(2 * bi + 2) * plane].split_at_mut(plane);
        fourier.transform_planes(re, im, inverse);
    }
}

fn roll_planes(data: &[f64], planes: usize, h: usize, w: usize, dy: isize, dx: isize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    let (hi, wi) = (h as isize, w as isize);
    for p in 0..planes {
        let base = p * h * w;
        for r in 0..h {
            let sr = (r as isize - dy).rem_euclid(hi) as usize;
            for c in 0..w {
                let sc = (c as isize - dx).rem_euclid(wi) as usize;
                out[base + r * w + c] = data[base + sr * w + sc];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn square_and_product_gradients() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(3.0));
        let y = g.constant(Tensor::scalar(-2.0));
        let x2 = g.square(x);
        let xy = g.mul(x, y).unwrap();
        let loss = g.add(x2, xy).unwrap();
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.wrt(&g, x), vec![2.0 * 3.0 - 2.0]);
        assert_eq!(grads.wrt(&g, y), vec![3.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_input_has_zero_gradient() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[3], 1.0));
        let unused = g.constant(Tensor::full(&[2], 1.0));
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(&g, unused), vec![0.0, 0.0]);
    }

    #[test]
    fn identity_kernel_is_identity() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 5 * 6).map(|i| (i as f64).sin()).collect();
        let x = g.constant(t(&[1, 2, 5, 6], &data));
        let mut w = vec![0.0; 2 * 2 * 9];
        w[4] = 1.0; // out 0 <- in 0 centre tap
        w[3 * 9 + 4] = 1.0; // out 1 <- in 1 centre tap
        let w = g.constant(t(&[2, 2, 3, 3], &w));
        let y = g.conv2d(x, w, None).unwrap();
        assert_eq!(g.data(y), &data[..]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut g = Graph::new();
        let xd: Vec<f64> = (0..2 * 4 * 4).map(|i| (i as f64 * 0.37).cos()).collect();
        let wd: Vec<f64> = (0..3 * 2 * 9).map(|i| (i as f64 * 0.11).sin()).collect();
        let x = g.constant(t(&[1, 2, 4, 4], &xd));
        let w = g.constant(t(&[3, 2, 3, 3], &wd));
        let y = g.conv2d(x, w, None).unwrap();
        for o in 0..3 {
            for r in 0..4i32 {
                for c in 0..4i32 {
                    let mut acc = 0.0;
                    for i in 0..2 {
                        for a in 0..3i32 {
                            for b in 0..3i32 {
                                let (sr, sc) = (r + a - 1, c + b - 1);
                                if (0..4).contains(&sr) && (0..4).contains(&sc) {
                                    acc += wd[((o * 2 + i) * 3 + a as usize) * 3 + b as usize]
                                        * xd[(i * 4 + sr as usize) * 4 + sc as usize];
                                }
                            }
                        }
                    }
                    let got = g.data(y)[(o * 4 + r as usize) * 4 + c as usize];
                    assert!((got - acc).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn channel_max_ties_route_to_lower_channel() {
        let mut g = Graph::new();
        let x = g.constant(t(&[1, 2, 1, 3], &[1.0, 5.0, 2.0, 1.0, 4.0, 3.0]));
        let y = g.channel_max(x).unwrap();
        assert_eq!(g.data(y), &[1.0, 5.0, 3.0]);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(&g, x), vec![1.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn dropout_zero_rate_is_identity_and_mean_is_preserved() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::full(&[1, 1, 100, 100], 2.0));
        let mut rng = seeded(5);
        assert_eq!(g.dropout(x, 0.0, &mut rng).unwrap(), x);
        let y = g.dropout(x, 0.2, &mut rng).unwrap();
        let mean = g.data(y).iter().sum::<f64>() / 10_000.0;
        assert!((mean - 2.0).abs() < 0.05, "{mean}");
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn batch_norm_normalizes_and_inference_reuses_stats() {
        let mut g = Graph::new();
        let data: Vec<f64> = (0..2 * 3 * 4).map(|i| (i as f64 * 0.9).sin() * 3.0 + 1.0).collect();
        let x = g.constant(t(&[2, 3, 2, 2], &data));
        let gamma = g.constant(Tensor::full(&[3], 1.0));
        let beta = g.constant(Tensor::zeros(&[3]));
        let (y, stats) = g.batch_norm(x, gamma, beta, 0.0).unwrap();
        for c in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|b| g.data(y)[(b * 3 + c) * 4..(b * 3 + c + 1) * 4].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 8.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 8.0;
            assert!(m.abs() < 1e-12 && (v - 1.0).abs() < 1e-10);
        }
        let z = g
            .batch_norm_inference(x, gamma, beta, &stats.mean, &stats.var, 0.0)
            .unwrap();
        for (a, b) in g.data(y).iter().zip(g.data(z)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fft_of_constant_is_dc() {
        let mut g = Graph::new();
        let mut d = vec![1.0; 16];
        d.extend(vec![0.0; 16]);
        let x = g.constant(t(&[1, 2, 4, 4], &d));
        let y = g.fft2(x).unwrap();
        assert!((g.data(y)[0] - 4.0).abs() < 1e-12);
        assert!(g.data(y)[1..].iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn param_grads_written_back() {
        let mut store = ParamStore::new();
        let a = store.insert("a", crate::tensor::ParamKind::Trainable, Tensor::full(&[2], 3.0));
        let b = store.insert("b", crate::tensor::ParamKind::Trainable, Tensor::full(&[1], 1.0));
        let mut g = Graph::new();
        let va = g.param(&store, a);
        let va2 = g.param(&store, a);
        let prod = g.mul(va, va2).unwrap();
        let s = g.sum(prod);
        let grads = g.backward(s).unwrap();
        g.write_param_grads(&grads, &mut store);
        assert_eq!(store.get(a).grad.as_deref(), Some(&[6.0, 6.0][..]));
        assert_eq!(store.get(b).grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 2]));
        let b = g.constant(Tensor::zeros(&[4]));
        assert!(matches!(g.add(a, b), Err(Error::Shape(_))));
        let x = g.constant(Tensor::zeros(&[1, 3, 4, 4]));
        assert!(g.channel_max(x).is_err());
        assert!(g.fft2(x).is_err());
        assert!(g.block_mean(x, 3).is_err());
    }
}
