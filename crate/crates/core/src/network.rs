//! Reconstruction networks and the discriminator.
//!
//! A reconstructor upsamples the low-resolution intensity by nearest
//! neighbour to the object grid, then applies eight blocks of
//! `conv 3x3 -> batch norm -> maxout -> dropout? -> residual?` and a final
//! linear `conv 3x3` to one channel. The listed channel counts are conv
//! outputs; maxout over channel pairs halves them. Residual links add the
//! output of block `from` into the output of block `to`, zero-padding the
//! narrower activation along the channel axis.
//!
//! Two reconstructors with independent parameters produce the real and
//! imaginary parts. The discriminator sees `[B, 2, H, W]` fields and returns
//! one logit per batch element.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{BatchStats, Graph, ParamId, ParamKind, ParamStore, Tensor, Var};

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;
pub const INIT_SIGMA: f64 = 0.1;

/// Draws from `N(0, sigma^2)` truncated to `[-2 sigma, 2 sigma]` by rejection.
pub fn truncated_normal(rng: &mut Rng, sigma: f64, n: usize) -> Vec<f64> {
    (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break sigma * z;
            }
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub layer_channels: Vec<usize>,
    pub kernel_size: usize,
    pub dropout_layers: Vec<usize>,
    pub dropout_rate: f64,
    pub residual_links: Vec<(usize, usize)>,
    pub upsample: usize,
}

impl ConvNetSpec {
    /// Eight blocks of 10..80 channels with dropout on the middle four and
    /// mirrored skip links.
    pub fn standard(upsample: usize) -> Self {
        Self {
            layer_channels: vec![10, 20, 30, 40, 50, 60, 70, 80],
            kernel_size: 3,
            dropout_layers: vec![2, 3, 4, 5],
            dropout_rate: 0.2,
            residual_links: vec![(0, 6), (1, 5), (2, 4)],
            upsample,
        }
    }

    pub fn without_dropout(mut self) -> Self {
        self.dropout_layers.clear();
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.layer_channels.is_empty() {
            return bad("reconstructor needs at least one layer".into());
        }
        if let Some(c) = self.layer_channels.iter().find(|&&c| c == 0 || c % 2 != 0) {
            return bad(format!("layer channel count {c} must be positive and even for maxout"));
        }
        if self.kernel_size % 2 == 0 {
            return bad(format!("kernel size {} must be odd", self.kernel_size));
        }
        if self.upsample == 0 {
            return bad("upsample factor must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout rate {} outside [0, 1)", self.dropout_rate));
        }
        let n = self.layer_channels.len();
        if let Some(l) = self.dropout_layers.iter().find(|&&l| l >= n) {
            return bad(format!("dropout layer {l} out of range"));
        }
        for &(from, to) in &self.residual_links {
            if from >= to || to >= n {
                return bad(format!("residual link ({from}, {to}) must go forward within {n} layers"));
            }
            if self.layer_channels[from] > self.layer_channels[to] {
                return bad(format!("residual link ({from}, {to}) would narrow the activation"));
            }
        }
        Ok(())
    }

    /// Number of trainable scalars in one reconstructor.
    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let mut c_in = 1;
        let mut total = 0;
        for &c in &self.layer_channels {
            total += c * c_in * k2 + c + 2 * c;
            c_in = c / 2;
        }
        total + c_in * k2 + 1
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorSpec {
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
}

impl Default for DiscriminatorSpec {
    fn default() -> Self {
        Self {
            conv_channels: vec![8, 16],
            kernel_size: 3,
        }
    }
}

impl DiscriminatorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.conv_channels.is_empty() || self.conv_channels.iter().any(|&c| c == 0 || c % 2 != 0) {
            return Err(Error::InvalidConfig(format!(
                "discriminator channels {:?} must be non-empty, positive and even",
                self.conv_channels
            )));
        }
        if self.kernel_size % 2 == 0 {
            return Err(Error::InvalidConfig("discriminator kernel must be odd".into()));
        }
        Ok(())
    }

    pub fn parameter_count(&self) -> usize {
        let k2 = self.kernel_size * self.kernel_size;
        let mut c_in = 2;
        let mut total = 0;
        for &c in &self.conv_channels {
            total += c * c_in * k2 + c;
            c_in = c / 2;
        }
        total + c_in + 1
    }
}

/// Training mode draws dropout masks and normalizes with batch statistics;
/// evaluation mode uses the running statistics and no dropout.
pub enum Mode<'a> {
    Train(&'a mut Rng),
    Eval,
}

/// Batch statistics observed in one training-mode pass, keyed by the running
/// buffers they feed.
#[derive(Debug, Default)]
pub struct ObservedStats {
    entries: Vec<(ParamId, ParamId, BatchStats)>,
}

impl ObservedStats {
    /// `running = momentum * running + (1 - momentum) * batch`.
    pub fn apply(&self, store: &mut ParamStore, momentum: f64) {
        for (mean_id, var_id, stats) in &self.entries {
            for (id, batch) in [(mean_id, &stats.mean), (var_id, &stats.var)] {
                for (r, b) in store.get_mut(*id).data_mut().iter_mut().zip(batch) {
                    *r = momentum * *r + (1.0 - momentum) * b;
                }
            }
        }
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

fn insert_random(store: &mut ParamStore, rng: &mut Rng, name: String, shape: &[usize]) -> ParamId {
    let n = shape.iter().product();
    let t = Tensor::new(shape, truncated_normal(rng, INIT_SIGMA, n)).expect("shape");
    store.insert(name, ParamKind::Trainable, t)
}

#[derive(Clone, Debug)]
struct Block {
    weight: ParamId,
    bias: ParamId,
    gamma: ParamId,
    beta: ParamId,
    running_mean: ParamId,
    running_var: ParamId,
}

/// One reconstruction branch, parameters held in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Reconstructor {
    spec: ConvNetSpec,
    lowres: (usize, usize),
    blocks: Vec<Block>,
    out_weight: ParamId,
    out_bias: ParamId,
}

impl Reconstructor {
    /// Registers the branch's parameters under `prefix`. The high-resolution
    /// grid must be exactly `upsample` times the low-resolution grid.
    pub fn build(
        spec: &ConvNetSpec,
        lowres: (usize, usize),
        highres: (usize, usize),
        prefix: &str,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        spec.validate()?;
        let k = spec.upsample;
        if (lowres.0 * k, lowres.1 * k) != highres {
            return Err(Error::Shape(format!(
                "upsampling {lowres:?} by {k} does not give {highres:?}"
            )));
        }
        let ks = spec.kernel_size;
        let mut c_in = 1;
        let mut blocks = Vec::with_capacity(spec.layer_channels.len());
        for (i, &c) in spec.layer_channels.iter().enumerate() {
            let p = format!("{prefix}.block{i}");
            let weight = insert_random(store, rng, format!("{p}.weight"), &[c, c_in, ks, ks]);
            let bias = insert_random(store, rng, format!("{p}.bias"), &[c]);
            let gamma = store.insert(format!("{p}.bn_gamma"), ParamKind::Trainable, Tensor::full(&[c], 1.0));
            let beta = store.insert(format!("{p}.bn_beta"), ParamKind::Trainable, Tensor::zeros(&[c]));
            let running_mean = store.insert(format!("{p}.bn_mean"), ParamKind::Buffer, Tensor::zeros(&[c]));
            let running_var = store.insert(format!("{p}.bn_var"), ParamKind::Buffer, Tensor::full(&[c], 1.0));
            blocks.push(Block {
                weight,
                bias,
                gamma,
                beta,
                running_mean,
                running_var,
            });
            c_in = c / 2;
        }
        let out_weight = insert_random(store, rng, format!("{prefix}.out.weight"), &[1, c_in, ks, ks]);
        let out_bias = insert_random(store, rng, format!("{prefix}.out.bias"), &[1]);
        Ok(Self {
            spec: spec.clone(),
            lowres,
            blocks,
            out_weight,
            out_bias,
        })
    }

    pub fn spec(&self) -> &ConvNetSpec {
        &self.spec
    }

    /// Final-layer parameters, for tests that need a known output.
    pub fn output_params(&self) -> (ParamId, ParamId) {
        (self.out_weight, self.out_bias)
    }

    /// `[B, 1, h, w]` low-resolution intensities to `[B, 1, H, W]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        mode: &mut Mode<'_>,
        observed: &mut ObservedStats,
    ) -> Result<Var> {
        match *g.shape(input) {
            [_, 1, h, w] if (h, w) == self.lowres => {}
            ref s => {
                return Err(Error::Shape(format!(
                    "reconstructor expects [B, 1, {}, {}], got {s:?}",
                    self.lowres.0, self.lowres.1
                )))
            }
        }
        let mut x = g.upsample(input, self.spec.upsample)?;
        let mut outputs: Vec<Var> = Vec::with_capacity(self.blocks.len());
        for (i, b) in self.blocks.iter().enumerate() {
            let w = g.param(store, b.weight);
            let bias = g.param(store, b.bias);
            let gamma = g.param(store, b.gamma);
            let beta = g.param(store, b.beta);
            let conv = g.conv2d(x, w, Some(bias))?;
            let normed = match mode {
                Mode::Train(_) => {
                    let (y, stats) = g.batch_norm(conv, gamma, beta, BN_EPS)?;
                    observed.entries.push((b.running_mean, b.running_var, stats));
                    y
                }
                Mode::Eval => g.batch_norm_inference(
                    conv,
                    gamma,
                    beta,
                    store.get(b.running_mean).data(),
                    store.get(b.running_var).data(),
                    BN_EPS,
                )?,
            };
            let mut y = g.channel_max(normed)?;
            if let Mode::Train(rng) = mode {
                if self.spec.dropout_layers.contains(&i) {
                    y = g.dropout(y, self.spec.dropout_rate, rng)?;
                }
            }
            for &(from, to) in &self.spec.residual_links {
                if to == i {
                    y = g.pad_add(outputs[from], y)?;
                }
            }
            outputs.push(y);
            x = y;
        }
        let w = g.param(store, self.out_weight);
        let bias = g.param(store, self.out_bias);
        g.conv2d(x, w, Some(bias))
    }
}

/// Real and imaginary branches.
#[derive(Clone, Debug)]
pub struct ReconstructorPair {
    pub real: Reconstructor,
    pub imag: Reconstructor,
}

impl ReconstructorPair {
    pub fn build(
        spec: &ConvNetSpec,
        lowres: (usize, usize),
        highres: (usize, usize),
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        Ok(Self {
            real: Reconstructor::build(spec, lowres, highres, "real", store, rng)?,
            imag: Reconstructor::build(spec, lowres, highres, "imag", store, rng)?,
        })
    }

    /// `[B, 1, h, w]` intensities to a `[B, 2, H, W]` complex estimate.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        input: Var,
        mode: &mut Mode<'_>,
        observed: &mut ObservedStats,
    ) -> Result<Var> {
        let re = self.real.forward(g, store, input, mode, observed)?;
        let im = self.imag.forward(g, store, input, mode, observed)?;
        g.concat_channels(re, im)
    }
}

#[derive(Clone, Debug)]
pub struct Discriminator {
    convs: Vec<(ParamId, ParamId)>,
    dense_weight: ParamId,
    dense_bias: ParamId,
}

impl Discriminator {
    pub fn build(spec: &DiscriminatorSpec, prefix: &str, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        spec.validate()?;
        let ks = spec.kernel_size;
        let mut c_in = 2;
        let mut convs = Vec::new();
        for (i, &c) in spec.conv_channels.iter().enumerate() {
            let w = insert_random(store, rng, format!("{prefix}.conv{i}.weight"), &[c, c_in, ks, ks]);
            let b = insert_random(store, rng, format!("{prefix}.conv{i}.bias"), &[c]);
            convs.push((w, b));
            c_in = c / 2;
        }
        let dense_weight = insert_random(store, rng, format!("{prefix}.dense.weight"), &[c_in, 1]);
        let dense_bias = insert_random(store, rng, format!("{prefix}.dense.bias"), &[1]);
        Ok(Self {
            convs,
            dense_weight,
            dense_bias,
        })
    }

    /// `[B, 2, H, W]` fields to `[B, 1]` logits.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, field: Var) -> Result<Var> {
        if !matches!(*g.shape(field), [_, 2, _, _]) {
            return Err(Error::Shape(format!(
                "discriminator expects [B, 2, H, W], got {:?}",
                g.shape(field)
            )));
        }
        let mut x = field;
        for &(w, b) in &self.convs {
            let w = g.param(store, w);
            let b = g.param(store, b);
            let conv = g.conv2d(x, w, Some(b))?;
            x = g.channel_max(conv)?;
        }
        let pooled = g.global_mean_pool(x)?;
        let w = g.param(store, self.dense_weight);
        let b = g.param(store, self.dense_bias);
        let z = g.matmul(pooled, w)?;
        g.add_channel_bias(z, b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optics::Preset;
    use crate::rng::seeded;

    fn build(preset: Preset) -> (ParamStore, ReconstructorPair, (usize, usize)) {
        let cfg = preset.config();
        let spec = ConvNetSpec::standard(cfg.downsample_factor());
        let mut store = ParamStore::new();
        let pair = ReconstructorPair::build(
            &spec,
            cfg.lowres_shape(),
            cfg.highres_shape(),
            &mut store,
            &mut seeded(1),
        )
        .unwrap();
        (store, pair, cfg.lowres_shape())
    }

    fn lowres_input(g: &mut Graph, b: usize, (h, w): (usize, usize), value: f64) -> Var {
        g.constant(Tensor::full(&[b, 1, h, w], value))
    }

    #[test]
    fn truncated_normal_stays_within_two_sigma() {
        let v = truncated_normal(&mut seeded(3), 0.1, 20_000);
        assert!(v.iter().all(|x| x.abs() <= 0.2));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        let sd = (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt();
        assert!(mean.abs() < 0.003);
        // Standard deviation of N(0, 1) truncated at +-2 is 0.8796.
        assert!((sd - 0.08796).abs() < 0.002, "{sd}");
    }

    #[test]
    fn output_shapes_for_every_preset() {
        for preset in Preset::ALL {
            let cfg = preset.config();
            let (store, pair, lowres) = build(preset);
            // One branch at batch 1 keeps the 512x512 preset within memory;
            // the branches are architecturally identical.
            let mut g = Graph::new();
            let x = lowres_input(&mut g, 1, lowres, 0.3);
            let y = pair
                .real
                .forward(&mut g, &store, x, &mut Mode::Eval, &mut ObservedStats::default())
                .unwrap();
            let (hh, hw) = cfg.highres_shape();
            assert_eq!(g.shape(y), &[1, 1, hh, hw], "{preset}");
        }
    }

    #[test]
    fn table1_maps_8x8_to_32x32() {
        let (store, pair, lowres) = build(Preset::Table1);
        assert_eq!(lowres, (8, 8));
        let mut g = Graph::new();
        let x = lowres_input(&mut g, 2, lowres, 1.0);
        let y = pair
            .forward(&mut g, &store, x, &mut Mode::Eval, &mut ObservedStats::default())
            .unwrap();
        assert_eq!(g.shape(y), &[2, 2, 32, 32]);
    }

    #[test]
    fn incompatible_upsample_is_rejected() {
        let spec = ConvNetSpec::standard(3);
        let mut store = ParamStore::new();
        assert!(matches!(
            Reconstructor::build(&spec, (8, 8), (32, 32), "r", &mut store, &mut seeded(0)),
            Err(Error::Shape(_))
        ));
        let mut bad = ConvNetSpec::standard(4);
        bad.residual_links.push((5, 5));
        assert!(bad.validate().is_err());
    }

    #[test]
    fn zero_final_layer_gives_zero_output() {
        let (mut store, pair, lowres) = build(Preset::Table1);
        let (w, b) = pair.real.output_params();
        store.get_mut(w).data_mut().fill(0.0);
        store.get_mut(b).data_mut().fill(0.0);
        let mut g = Graph::new();
        let x = lowres_input(&mut g, 1, lowres, 0.0);
        let y = pair
            .real
            .forward(&mut g, &store, x, &mut Mode::Eval, &mut ObservedStats::default())
            .unwrap();
        assert!(g.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn parameter_count_matches_store() {
        let (store, _, _) = build(Preset::Table1);
        let spec = ConvNetSpec::standard(4);
        assert_eq!(store.parameter_count(), 2 * spec.parameter_count());
        let mut d = ParamStore::new();
        let dspec = DiscriminatorSpec::default();
        Discriminator::build(&dspec, "disc", &mut d, &mut seeded(2)).unwrap();
        assert_eq!(d.parameter_count(), dspec.parameter_count());
    }

    #[test]
    fn branches_share_no_parameters() {
        let (store, _, _) = build(Preset::Table3);
        let real: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("real.")).collect();
        let imag: Vec<_> = store.ids().filter(|&id| store.name(id).starts_with("imag.")).collect();
        assert_eq!(real.len(), imag.len());
        assert_eq!(real.len() + imag.len(), store.len());
        let w_real = store.find("real.block0.weight").unwrap();
        let w_imag = store.find("imag.block0.weight").unwrap();
        assert_ne!(store.get(w_real), store.get(w_imag));
    }

    #[test]
    fn training_mode_updates_running_stats() {
        let (mut store, pair, lowres) = build(Preset::Table3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[4, 1, lowres.0, lowres.1], vec![0.1, 0.7, 1.3, 2.0]).unwrap());
        let mut rng = seeded(8);
        let mut observed = ObservedStats::default();
        pair.forward(&mut g, &store, x, &mut Mode::Train(&mut rng), &mut observed)
            .unwrap();
        assert_eq!(observed.entries.len(), 16);
        let id = store.find("real.block0.bn_mean").unwrap();
        let before = store.get(id).clone();
        observed.apply(&mut store, BN_MOMENTUM);
        assert_ne!(store.get(id), &before);
    }

    #[test]
    fn discriminator_is_deterministic_and_finite() {
        let mut store = ParamStore::new();
        let d = Discriminator::build(&DiscriminatorSpec::default(), "disc", &mut store, &mut seeded(4)).unwrap();
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[3, 2, 8, 8]));
        let a = d.forward(&mut g, &store, x).unwrap();
        let b = d.forward(&mut g, &store, x).unwrap();
        assert_eq!(g.shape(a), &[3, 1]);
        assert_eq!(g.data(a), g.data(b));
        assert!(g.data(a).iter().all(|v| v.is_finite()));
    }

    #[test]
    fn discriminator_separates_ones_from_zeros() {
        let mut store = ParamStore::new();
        let d = Discriminator::build(&DiscriminatorSpec::default(), "disc", &mut store, &mut seeded(5)).unwrap();
        let reals = Tensor::full(&[4, 2, 4, 4], 1.0);
        let fakes = Tensor::zeros(&[4, 2, 4, 4]);
        let lr = 0.05;
        for _ in 0..300 {
            let mut g = Graph::new();
            let r = g.constant(reals.clone());
            let f = g.constant(fakes.clone());
            let zr = d.forward(&mut g, &store, r).unwrap();
            let zf = d.forward(&mut g, &store, f).unwrap();
            let loss = crate::objective::graph_loss_d(&mut g, zf, zr).unwrap();
            let grads = g.backward(loss).unwrap();
            g.write_param_grads(&grads, &mut store);
            for id in store.ids().collect::<Vec<_>>() {
                let t = store.get_mut(id);
                let grad = t.grad.take().unwrap();
                for (p, gr) in t.data_mut().iter_mut().zip(grad) {
                    *p -= lr * gr;
                }
            }
        }
        let mut g = Graph::new();
        let r = g.constant(reals);
        let f = g.constant(fakes);
        let zr = d.forward(&mut g, &store, r).unwrap();
        let zf = d.forward(&mut g, &store, f).unwrap();
        assert!(g.data(zr).iter().all(|&z| z > 0.0), "{:?}", g.data(zr));
        assert!(g.data(zf).iter().all(|&z| z < 0.0), "{:?}", g.data(zf));
    }
}
