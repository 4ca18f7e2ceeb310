//! Joint optimization of LED weights and reconstruction networks.
//!
//! Each iteration draws a batch of training objects with replacement, images
//! them through the optics under the current LED weights, adds shot noise and
//! reconstructs. The discriminator takes one step on the detached
//! reconstruction first; the generator side (networks and, when trainable,
//! LED weights) then takes one step on `J = M + 1000 G + C` scored by the
//! updated discriminator. LED weights are clamped to `[0, 1]` after every
//! step. A running average of the trainable parameters is kept for
//! evaluation.

use serde::{Deserialize, Serialize};

use crate::channel::{check_m, standard_normals};
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::network::{
    ConvNetSpec, Discriminator, DiscriminatorSpec, Mode, ObservedStats, ReconstructorPair, BN_MOMENTUM,
};
use crate::objective::{graph_loss_d, graph_objective, loss_g, loss_m, LossReport, ALPHA};
use crate::optics::{project_unit_interval, ComplexField, ForwardModel, IntensityImage, OpticalConfig};
use crate::rng::{substream, Rng};
use crate::tensor::{Graph, ParamId, ParamKind, ParamStore, Tensor, Var};
use rand::Rng as _;

const STREAM_NETWORK: u64 = 0;
const STREAM_DISCRIMINATOR: u64 = 1;
const STREAM_LEDS: u64 = 2;
const STREAM_BATCHES: u64 = 3;
const STREAM_DROPOUT: u64 = 4;
const STREAM_NOISE: u64 = 5;

pub const LED_PARAM: &str = "leds";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr0: f64,
    /// Multiplicative learning-rate decay applied every `decay_every` iterations.
    pub lr_decay: f64,
    pub decay_every: u64,
    pub ema_decay: f64,
    pub adam: AdamConfig,
    pub dropout: bool,
    /// Include the adversarial term `C` in the generator objective.
    pub adversarial: bool,
    /// LED weights are recorded every this many iterations, and at the end.
    pub snapshot_every: u64,
    pub seed: u64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            iterations: 5000,
            batch_size: 4,
            lr0: 1e-2,
            lr_decay: 0.99,
            decay_every: 1000,
            ema_decay: 0.999,
            adam: AdamConfig::default(),
            dropout: true,
            adversarial: true,
            snapshot_every: 100,
            seed: 0,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            return bad("learning rate must be positive");
        }
        if !(self.lr_decay > 0.0 && self.lr_decay < 1.0) {
            return bad("learning-rate decay must lie in (0, 1)");
        }
        if self.decay_every == 0 || self.snapshot_every == 0 {
            return bad("decay and snapshot intervals must be positive");
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad("EMA decay must lie in (0, 1)");
        }
        let a = &self.adam;
        if !(a.beta1 > 0.0 && a.beta1 < 1.0 && a.beta2 > 0.0 && a.beta2 < 1.0 && a.eps > 0.0) {
            return bad("Adam betas must lie in (0, 1) and epsilon be positive");
        }
        Ok(())
    }

    /// Staircase schedule `lr0 * decay^floor(iteration / decay_every)`.
    pub fn learning_rate(&self, iteration: u64) -> f64 {
        self.lr0 * self.lr_decay.powi((iteration / self.decay_every) as i32)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LedInit {
    UniformOne,
    SeededUniformRandom,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaseSpec {
    pub case_id: u8,
    pub led_init: LedInit,
    pub led_trainable: bool,
}

impl CaseSpec {
    /// Case 1: uniform, fixed. Case 2: uniform, trained. Case 3: random, fixed.
    /// Case 4: random, trained, with the same draw as case 3.
    pub fn new(case_id: u8) -> Result<Self> {
        let (led_init, led_trainable) = match case_id {
            1 => (LedInit::UniformOne, false),
            2 => (LedInit::UniformOne, true),
            3 => (LedInit::SeededUniformRandom, false),
            4 => (LedInit::SeededUniformRandom, true),
            _ => return Err(Error::InvalidConfig(format!("case id {case_id} is not one of 1-4"))),
        };
        Ok(Self {
            case_id,
            led_init,
            led_trainable,
        })
    }

    /// Initial LED weights. The random draw depends only on `seed`.
    pub fn initial_leds(&self, count: usize, seed: u64) -> Vec<f64> {
        match self.led_init {
            LedInit::UniformOne => vec![1.0; count],
            LedInit::SeededUniformRandom => {
                let mut rng = substream(seed, STREAM_LEDS);
                (0..count).map(|_| rng.random::<f64>()).collect()
            }
        }
    }
}

/// Clamps LED weights to `[0, 1]`.
pub fn project_led(weights: &mut [f64]) {
    project_unit_interval(weights);
}

/// First and second moment estimates of one array.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AdamSlot {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl AdamSlot {
    pub fn zeros(n: usize) -> Self {
        Self {
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }
}

/// One bias-corrected Adam update; `t` is the 1-based step count.
pub fn adam_step(params: &mut [f64], grads: &[f64], slot: &mut AdamSlot, t: u64, lr: f64, cfg: &AdamConfig) -> Result<()> {
    if params.len() != grads.len() || slot.m.len() != params.len() || slot.v.len() != params.len() {
        return Err(Error::Shape(format!(
            "adam: {} params, {} grads, {} moments",
            params.len(),
            grads.len(),
            slot.m.len()
        )));
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite(format!("gradient element {i} is {}", grads[i])));
    }
    let c1 = 1.0 - cfg.beta1.powi(t as i32);
    let c2 = 1.0 - cfg.beta2.powi(t as i32);
    for i in 0..params.len() {
        slot.m[i] = cfg.beta1 * slot.m[i] + (1.0 - cfg.beta1) * grads[i];
        slot.v[i] = cfg.beta2 * slot.v[i] + (1.0 - cfg.beta2) * grads[i] * grads[i];
        params[i] -= lr * (slot.m[i] / c1) / ((slot.v[i] / c2).sqrt() + cfg.eps);
    }
    Ok(())
}

/// Adam over the trainable arrays of one store.
#[derive(Clone, Debug)]
pub struct Adam {
    cfg: AdamConfig,
    t: u64,
    slots: Vec<Option<AdamSlot>>,
}

impl Adam {
    pub fn new(cfg: AdamConfig, store: &ParamStore) -> Self {
        Self {
            cfg,
            t: 0,
            slots: vec![None; store.len()],
        }
    }

    /// Consumes the gradients stored on every trainable array.
    pub fn step(&mut self, store: &mut ParamStore, lr: f64) -> Result<()> {
        self.t += 1;
        for id in store.trainable().collect::<Vec<_>>() {
            let t = store.get_mut(id);
            let grad = t.grad.take().unwrap_or_else(|| vec![0.0; t.len()]);
            let slot = self.slots[id.0].get_or_insert_with(|| AdamSlot::zeros(grad.len()));
            adam_step(t.data_mut(), &grad, slot, self.t, lr, &self.cfg).map_err(|e| match e {
                Error::NonFinite(m) => Error::NonFinite(format!("{}: {m}", store.name(id))),
                other => other,
            })?;
        }
        Ok(())
    }
}

/// Optics and network structure; the arrays live in separate stores.
#[derive(Clone, Debug)]
pub struct Model {
    pub optics: ForwardModel,
    pub net_spec: ConvNetSpec,
    pub disc_spec: DiscriminatorSpec,
    pub pair: ReconstructorPair,
    pub disc: Discriminator,
    pub leds: ParamId,
}

/// Generator-side arrays (LED weights first, then both branches) and the
/// discriminator's arrays.
#[derive(Clone, Debug, PartialEq)]
pub struct Stores {
    pub gen: ParamStore,
    pub disc: ParamStore,
}

impl Model {
    /// Builds the structure and a fresh initialization from `seed`.
    pub fn build(
        config: &OpticalConfig,
        net_spec: &ConvNetSpec,
        disc_spec: &DiscriminatorSpec,
        case: &CaseSpec,
        seed: u64,
    ) -> Result<(Self, Stores)> {
        let optics = ForwardModel::new(config)?;
        let mut gen = ParamStore::new();
        let kind = if case.led_trainable {
            ParamKind::Trainable
        } else {
            ParamKind::Frozen
        };
        let leds = gen.insert(
            LED_PARAM,
            kind,
            Tensor::new(&[optics.led_count()], case.initial_leds(optics.led_count(), seed))?,
        );
        let pair = ReconstructorPair::build(
            net_spec,
            config.lowres_shape(),
            config.highres_shape(),
            &mut gen,
            &mut substream(seed, STREAM_NETWORK),
        )?;
        let mut disc_store = ParamStore::new();
        let disc = Discriminator::build(disc_spec, "disc", &mut disc_store, &mut substream(seed, STREAM_DISCRIMINATOR))?;
        Ok((
            Self {
                optics,
                net_spec: net_spec.clone(),
                disc_spec: disc_spec.clone(),
                pair,
                disc,
                leds,
            },
            Stores { gen, disc: disc_store },
        ))
    }

    pub fn config(&self) -> &OpticalConfig {
        self.optics.config()
    }

    /// Per-object LED stacks `[B, L, h, w]` and targets `[B, 2, H, W]`.
    pub fn batch_tensors(&self, objects: &[&ComplexField]) -> Result<(Tensor, Tensor)> {
        let (h, w) = self.optics.lowres_shape();
        let (hh, hw) = self.config().highres_shape();
        let l = self.optics.led_count();
        let mut stack = Vec::with_capacity(objects.len() * l * h * w);
        let mut actual = Vec::with_capacity(objects.len() * 2 * hh * hw);
        for o in objects {
            stack.extend(self.optics.led_stack(o)?);
            actual.extend_from_slice(&o.re);
            actual.extend_from_slice(&o.im);
        }
        let b = objects.len();
        Ok((Tensor::new(&[b, l, h, w], stack)?, Tensor::new(&[b, 2, hh, hw], actual)?))
    }

    /// Clean sensor images of a batch under the current LED weights.
    fn sensor(&self, g: &mut Graph, store: &ParamStore, stack: Tensor) -> Result<Var> {
        let leds = g.param(store, self.leds);
        let stack = g.constant(stack);
        g.channel_combine(stack, leds)
    }

    /// Reconstructs noisy sensor images in evaluation mode.
    pub fn reconstruct(&self, store: &ParamStore, sensor: &[IntensityImage]) -> Result<Vec<ComplexField>> {
        let (h, w) = self.optics.lowres_shape();
        let (hh, hw) = self.config().highres_shape();
        let mut data = Vec::with_capacity(sensor.len() * h * w);
        for s in sensor {
            if (s.rows, s.cols) != (h, w) {
                return Err(Error::Shape(format!("sensor image {}x{} for {h}x{w}", s.rows, s.cols)));
            }
            data.extend_from_slice(&s.data);
        }
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[sensor.len(), 1, h, w], data)?);
        let y = self.pair.forward(&mut g, store, x, &mut Mode::Eval, &mut ObservedStats::default())?;
        let out = g.data(y);
        let px = hh * hw;
        (0..sensor.len())
            .map(|b| {
                ComplexField::new(
                    hh,
                    hw,
                    out[2 * b * px..(2 * b + 1) * px].to_vec(),
                    out[(2 * b + 1) * px..(2 * b + 2) * px].to_vec(),
                    self.config().highres_pitch(),
                )
            })
            .collect()
    }

    /// Copies every array of `source` into `target` by name, checking shapes.
    pub fn load_arrays(target: &mut ParamStore, source: &ParamStore) -> Result<()> {
        if target.len() != source.len() {
            return Err(Error::Shape(format!(
                "checkpoint holds {} arrays, model expects {}",
                source.len(),
                target.len()
            )));
        }
        for id in target.ids().collect::<Vec<_>>() {
            let name = target.name(id).to_string();
            let src = source
                .find(&name)
                .ok_or_else(|| Error::Shape(format!("checkpoint lacks array {name}")))?;
            let s = source.get(src);
            if s.shape() != target.get(id).shape() {
                return Err(Error::Shape(format!(
                    "array {name}: checkpoint {:?}, model {:?}",
                    s.shape(),
                    target.get(id).shape()
                )));
            }
            target.get_mut(id).data_mut().copy_from_slice(s.data());
            target.set_kind(id, source.kind(src));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a [`Model`] from a checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub iteration: u64,
    pub case: CaseSpec,
    pub m: f64,
    pub preset: String,
    pub parameter_count: usize,
    pub ema_decay: f64,
    pub schedule: TrainSchedule,
    pub network: ConvNetSpec,
    pub discriminator: DiscriminatorSpec,
    pub optics: OpticalConfig,
}

pub const STORE_PARAMS: &str = "params";
pub const STORE_EMA: &str = "ema";
pub const STORE_DISC: &str = "disc";

/// A snapshot of training: live parameters, their running average and the
/// discriminator.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub iteration: u64,
    pub stores: Stores,
    pub ema: ParamStore,
}

impl TrainState {
    pub fn leds(&self) -> &[f64] {
        self.stores.gen.get(self.stores.gen.find(LED_PARAM).expect("led array")).data()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum RunStatus {
    Completed,
    /// Stopped before applying a non-finite update; the state is the last
    /// finite one.
    Diverged { iteration: u64, message: String },
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub model: Model,
    pub case: CaseSpec,
    pub m: f64,
    pub preset: String,
    pub schedule: TrainSchedule,
    pub initial: TrainState,
    pub state: TrainState,
    pub reports: Vec<LossReport>,
    /// `(iteration, weights)`, starting at iteration 0.
    pub led_snapshots: Vec<(u64, Vec<f64>)>,
    pub status: RunStatus,
}

impl TrainRun {
    fn meta(&self, state: &TrainState) -> CheckpointMeta {
        CheckpointMeta {
            iteration: state.iteration,
            case: self.case,
            m: self.m,
            preset: self.preset.clone(),
            parameter_count: state.stores.gen.parameter_count(),
            ema_decay: self.schedule.ema_decay,
            schedule: self.schedule.clone(),
            network: self.model.net_spec.clone(),
            discriminator: self.model.disc_spec.clone(),
            optics: self.model.config().clone(),
        }
    }

    pub fn checkpoint_of(&self, state: &TrainState) -> Checkpoint<CheckpointMeta> {
        Checkpoint {
            meta: self.meta(state),
            stores: vec![
                (STORE_PARAMS.into(), state.stores.gen.clone()),
                (STORE_EMA.into(), state.ema.clone()),
                (STORE_DISC.into(), state.stores.disc.clone()),
            ],
        }
    }

    pub fn final_checkpoint(&self) -> Checkpoint<CheckpointMeta> {
        self.checkpoint_of(&self.state)
    }

    pub fn initial_checkpoint(&self) -> Checkpoint<CheckpointMeta> {
        self.checkpoint_of(&self.initial)
    }
}

/// A model restored from a checkpoint.
#[derive(Clone, Debug)]
pub struct Restored {
    pub model: Model,
    pub meta: CheckpointMeta,
    pub state: TrainState,
}

pub fn restore(ck: &Checkpoint<CheckpointMeta>) -> Result<Restored> {
    let meta = ck.meta.clone();
    let (model, mut stores) = Model::build(&meta.optics, &meta.network, &meta.discriminator, &meta.case, 0)?;
    let get = |name: &str| {
        ck.store(name)
            .ok_or_else(|| Error::Format(format!("checkpoint has no {name:?} store")))
    };
    Model::load_arrays(&mut stores.gen, get(STORE_PARAMS)?)?;
    Model::load_arrays(&mut stores.disc, get(STORE_DISC)?)?;
    let mut ema = stores.gen.clone();
    Model::load_arrays(&mut ema, get(STORE_EMA)?)?;
    if stores.gen.parameter_count() != meta.parameter_count {
        return Err(Error::Format(format!(
            "header records {} parameters, arrays hold {}",
            meta.parameter_count,
            stores.gen.parameter_count()
        )));
    }
    Ok(Restored {
        model,
        state: TrainState {
            iteration: meta.iteration,
            stores,
            ema,
        },
        meta,
    })
}

fn ema_update(ema: &mut ParamStore, live: &ParamStore, decay: f64) {
    for id in live.ids() {
        match live.kind(id) {
            ParamKind::Trainable => {
                for (e, p) in ema.get_mut(id).data_mut().iter_mut().zip(live.get(id).data()) {
                    *e = decay * *e + (1.0 - decay) * p;
                }
            }
            ParamKind::Buffer => ema.get_mut(id).data_mut().copy_from_slice(live.get(id).data()),
            ParamKind::Frozen => {}
        }
    }
}

/// Everything a training run needs besides the dataset.
#[derive(Clone, Debug)]
pub struct TrainSetup {
    pub config: OpticalConfig,
    pub preset: String,
    pub net_spec: ConvNetSpec,
    pub disc_spec: DiscriminatorSpec,
    pub case: CaseSpec,
    pub m: f64,
    pub schedule: TrainSchedule,
}

impl TrainSetup {
    /// Standard networks for `config`, dropout following the schedule.
    pub fn standard(config: OpticalConfig, preset: &str, case: CaseSpec, m: f64, schedule: TrainSchedule) -> Self {
        let mut net_spec = ConvNetSpec::standard(config.downsample_factor());
        if !schedule.dropout {
            net_spec = net_spec.without_dropout();
        }
        Self {
            config,
            preset: preset.to_string(),
            net_spec,
            disc_spec: DiscriminatorSpec::default(),
            case,
            m,
            schedule,
        }
    }
}

/// Per-run state carried across iterations that checkpoints do not record.
struct Optimizers {
    gen: Adam,
    disc: Adam,
    dropout: Rng,
    noise: Rng,
}

/// Trains on `train_objects`. `on_iteration` sees each completed iteration's
/// losses and the LED weights after projection.
pub fn train(
    setup: &TrainSetup,
    train_objects: &[ComplexField],
    mut on_iteration: impl FnMut(&LossReport, &[f64]),
) -> Result<TrainRun> {
    let sched = &setup.schedule;
    sched.validate()?;
    check_m(setup.m)?;
    if train_objects.is_empty() {
        return Err(Error::EmptyDataset("no training objects".into()));
    }
    let (model, stores) = Model::build(&setup.config, &setup.net_spec, &setup.disc_spec, &setup.case, sched.seed)?;
    let mut opt = Optimizers {
        gen: Adam::new(sched.adam, &stores.gen),
        disc: Adam::new(sched.adam, &stores.disc),
        dropout: substream(sched.seed, STREAM_DROPOUT),
        noise: substream(sched.seed, STREAM_NOISE),
    };
    let mut batch_rng = substream(sched.seed, STREAM_BATCHES);

    let initial = TrainState {
        iteration: 0,
        ema: stores.gen.clone(),
        stores,
    };
    let mut state = initial.clone();
    let mut reports = Vec::with_capacity(sched.iterations as usize);
    let mut led_snapshots = vec![(0, initial.leds().to_vec())];
    let mut status = RunStatus::Completed;

    for it in 1..=sched.iterations {
        let batch: Vec<&ComplexField> = (0..sched.batch_size)
            .map(|_| &train_objects[batch_rng.random_range(0..train_objects.len())])
            .collect();
        match train_step(&model, setup, &state, &batch, &mut opt, it) {
            Ok((report, next)) => {
                state = next;
                on_iteration(&report, state.leds());
                reports.push(report);
                if it % sched.snapshot_every == 0 || it == sched.iterations {
                    led_snapshots.push((it, state.leds().to_vec()));
                }
            }
            Err(e @ Error::NonFinite(_)) => {
                status = RunStatus::Diverged {
                    iteration: it,
                    message: e.to_string(),
                };
                break;
            }
            Err(e) => return Err(e),
        }
    }

    Ok(TrainRun {
        model,
        case: setup.case,
        m: setup.m,
        preset: setup.preset.clone(),
        schedule: sched.clone(),
        initial,
        state,
        reports,
        led_snapshots,
        status,
    })
}

/// One iteration `it` (1-based). Returns the losses and the updated state;
/// `state` itself is untouched, so a failure leaves the last finite state.
fn train_step(
    model: &Model,
    setup: &TrainSetup,
    state: &TrainState,
    batch: &[&ComplexField],
    opt: &mut Optimizers,
    it: u64,
) -> Result<(LossReport, TrainState)> {
    let sched = &setup.schedule;
    let lr = sched.learning_rate(it - 1);
    let (stack, actual) = model.batch_tensors(batch)?;
    let mut next = state.clone();

    let mut g = Graph::new();
    let clean = model.sensor(&mut g, &state.stores.gen, stack)?;
    let sensor = if setup.m.is_finite() {
        let draws = standard_normals(&mut opt.noise, g.value(clean).len());
        g.shot_noise(clean, &draws, setup.m)?
    } else {
        clean
    };
    let mut observed = ObservedStats::default();
    let pred = model.pair.forward(
        &mut g,
        &state.stores.gen,
        sensor,
        &mut Mode::Train(&mut opt.dropout),
        &mut observed,
    )?;
    let actual = g.constant(actual);

    let logits = if sched.adversarial {
        let mut gd = Graph::new();
        let fake = gd.constant(g.value(pred).clone());
        let real = gd.constant(g.value(actual).clone());
        let zf = model.disc.forward(&mut gd, &next.stores.disc, fake)?;
        let zr = model.disc.forward(&mut gd, &next.stores.disc, real)?;
        let loss = graph_loss_d(&mut gd, zf, zr)?;
        let grads = gd.backward(loss)?;
        gd.write_param_grads(&grads, &mut next.stores.disc);
        opt.disc.step(&mut next.stores.disc, lr)?;
        Some(model.disc.forward(&mut g, &next.stores.disc, pred)?)
    } else {
        None
    };

    let obj = graph_objective(&mut g, pred, actual, logits, ALPHA)?;
    let report = LossReport::new(
        it,
        g.data(obj.m)[0],
        g.data(obj.g)[0],
        obj.c.map_or(0.0, |c| g.data(c)[0]),
    );
    if !report.j.is_finite() {
        return Err(Error::NonFinite(format!("objective is {}", report.j)));
    }
    let grads = g.backward(obj.j)?;
    g.write_param_grads(&grads, &mut next.stores.gen);
    opt.gen.step(&mut next.stores.gen, lr)?;
    next.stores.gen.zero_grads();
    next.stores.disc.zero_grads();
    if setup.case.led_trainable {
        project_led(next.stores.gen.get_mut(model.leds).data_mut());
    }
    observed.apply(&mut next.stores.gen, BN_MOMENTUM);
    ema_update(&mut next.ema, &next.stores.gen, sched.ema_decay);
    next.iteration = it;
    Ok((report, next))
}

/// Mean losses over a set of objects.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub m: f64,
    pub mean_m: f64,
    pub mean_g: f64,
    pub samples: usize,
}

pub const EVAL_BATCH: usize = 16;

/// Simulates noisy sensor images of `objects` under the LED weights in
/// `store`. Noise is drawn from `seeded(seed)` object by object, so every `m`
/// sees the same standard-normal draws.
pub fn simulate_sensor(model: &Model, store: &ParamStore, objects: &[ComplexField], m: f64, seed: u64) -> Result<Vec<IntensityImage>> {
    check_m(m)?;
    let pattern = crate::optics::LedPattern::new(store.get(model.leds).data().to_vec());
    let mut rng = crate::rng::seeded(seed);
    objects
        .iter()
        .map(|o| {
            let clean = model.optics.forward_pattern(o, &pattern)?;
            if m.is_finite() {
                crate::channel::apply_noise(&clean, m, &mut rng)
            } else {
                Ok(clean)
            }
        })
        .collect()
}

/// Reconstructs every object in evaluation mode and averages `M` and `G`.
pub fn evaluate(model: &Model, store: &ParamStore, objects: &[ComplexField], m: f64, seed: u64) -> Result<EvalSummary> {
    if objects.is_empty() {
        return Err(Error::EmptyDataset("no evaluation objects".into()));
    }
    let sensor = simulate_sensor(model, store, objects, m, seed)?;
    let (mut sum_m, mut sum_g) = (0.0, 0.0);
    for (objs, imgs) in objects.chunks(EVAL_BATCH).zip(sensor.chunks(EVAL_BATCH)) {
        for (pred, actual) in model.reconstruct(store, imgs)?.iter().zip(objs) {
            sum_m += loss_m(pred, actual)?;
            sum_g += loss_g(pred, actual)?;
        }
    }
    let n = objects.len() as f64;
    Ok(EvalSummary {
        m,
        mean_m: sum_m / n,
        mean_g: sum_g / n,
        samples: objects.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_binary16;
    use crate::optics::Preset;

    fn setup(case: u8, iterations: u64) -> (TrainSetup, Vec<ComplexField>) {
        let data = make_binary16();
        let schedule = TrainSchedule {
            iterations,
            batch_size: 4,
            snapshot_every: 5,
            seed: 7,
            ..TrainSchedule::default()
        };
        let s = TrainSetup::standard(data.config.clone(), "table3", CaseSpec::new(case).unwrap(), 1.0, schedule);
        (s, data.objects().to_vec())
    }

    #[test]
    fn adam_first_step_moves_by_lr_against_gradient_sign() {
        let cfg = AdamConfig::default();
        let mut p = vec![1.0, 1.0, 1.0];
        let mut slot = AdamSlot::zeros(3);
        adam_step(&mut p, &[0.5, -2.0, 0.0], &mut slot, 1, 0.01, &cfg).unwrap();
        // m_hat = g and v_hat = g^2 after one step.
        assert!((p[0] - (1.0 - 0.01 * 0.5 / (0.5 + 1e-8))).abs() < 1e-15);
        assert!((p[1] - (1.0 + 0.01 * 2.0 / (2.0 + 1e-8))).abs() < 1e-15);
        assert_eq!(p[2], 1.0);
        assert!((slot.m[1] - -0.2).abs() < 1e-15);
        assert!((slot.v[1] - 0.004).abs() < 1e-15);
    }

    #[test]
    fn adam_rejects_non_finite_gradients() {
        let mut p = vec![0.0];
        let mut slot = AdamSlot::zeros(1);
        let r = adam_step(&mut p, &[f64::NAN], &mut slot, 1, 0.1, &AdamConfig::default());
        assert!(matches!(r, Err(Error::NonFinite(_))));
        assert_eq!(p, vec![0.0]);
    }

    #[test]
    fn adam_skips_frozen_arrays() {
        let mut store = ParamStore::new();
        let a = store.insert("a", ParamKind::Trainable, Tensor::full(&[2], 1.0));
        let b = store.insert("b", ParamKind::Frozen, Tensor::full(&[2], 1.0));
        store.get_mut(a).grad = Some(vec![1.0, 1.0]);
        store.get_mut(b).grad = Some(vec![1.0, 1.0]);
        let mut adam = Adam::new(AdamConfig::default(), &store);
        adam.step(&mut store, 0.1).unwrap();
        assert!(store.get(a).data()[0] < 1.0);
        assert_eq!(store.get(b).data(), &[1.0, 1.0]);
    }

    #[test]
    fn learning_rate_is_a_staircase() {
        let s = TrainSchedule::default();
        assert_eq!(s.learning_rate(0), 1e-2);
        assert_eq!(s.learning_rate(999), 1e-2);
        assert!((s.learning_rate(1000) - 0.99e-2).abs() < 1e-18);
        assert!((s.learning_rate(4999) - 1e-2 * 0.99f64.powi(4)).abs() < 1e-18);
    }

    #[test]
    fn projection_clamps_to_unit_interval() {
        let mut w = vec![1.3, -0.2, 0.5, 0.0, 1.0];
        project_led(&mut w);
        assert_eq!(w, vec![1.0, 0.0, 0.5, 0.0, 1.0]);
    }

    #[test]
    fn case_table() {
        assert!(CaseSpec::new(0).is_err() && CaseSpec::new(5).is_err());
        let c3 = CaseSpec::new(3).unwrap();
        let c4 = CaseSpec::new(4).unwrap();
        assert!(!c3.led_trainable && c4.led_trainable);
        let w = c3.initial_leds(25, 11);
        assert_eq!(w, c4.initial_leds(25, 11));
        assert!(w.iter().all(|v| (0.0..1.0).contains(v)));
        assert_ne!(w, c3.initial_leds(25, 12));
        assert_eq!(CaseSpec::new(1).unwrap().initial_leds(3, 0), vec![1.0; 3]);
    }

    #[test]
    fn schedule_validation() {
        assert!(TrainSchedule::default().validate().is_ok());
        for bad in [
            TrainSchedule { batch_size: 0, ..Default::default() },
            TrainSchedule { lr0: 0.0, ..Default::default() },
            TrainSchedule { ema_decay: 1.0, ..Default::default() },
            TrainSchedule { decay_every: 0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::InvalidConfig(_))));
        }
    }

    #[test]
    fn training_is_deterministic() {
        let (s, objs) = setup(4, 6);
        let a = train(&s, &objs, |_, _| {}).unwrap();
        let b = train(&s, &objs, |_, _| {}).unwrap();
        assert_eq!(a.reports, b.reports);
        assert_eq!(a.state, b.state);
        assert_eq!(a.status, RunStatus::Completed);
        assert_eq!(a.reports.len(), 6);
        assert_eq!(a.led_snapshots.iter().map(|s| s.0).collect::<Vec<_>>(), vec![0, 5, 6]);
    }

    #[test]
    fn zero_iterations_returns_initial_state() {
        let (s, objs) = setup(2, 0);
        let run = train(&s, &objs, |_, _| {}).unwrap();
        assert!(run.reports.is_empty());
        assert_eq!(run.state, run.initial);
        assert_eq!(run.initial.leds(), &vec![1.0; run.model.optics.led_count()][..]);
    }

    #[test]
    fn fixed_leds_stay_bit_identical_and_trained_leds_stay_in_bounds() {
        for case in 1..=4 {
            let (s, objs) = setup(case, 8);
            let mut seen = Vec::new();
            let run = train(&s, &objs, |_, w| seen.push(w.to_vec())).unwrap();
            assert!(seen.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
            let start = run.initial.leds();
            if case % 2 == 1 {
                assert!(seen.iter().all(|w| w == start));
            } else {
                assert!(seen.last().unwrap() != start);
            }
        }
    }

    #[test]
    fn loss_reports_are_consistent() {
        let (s, objs) = setup(2, 3);
        let run = train(&s, &objs, |_, _| {}).unwrap();
        for (i, r) in run.reports.iter().enumerate() {
            assert_eq!(r.iteration, i as u64 + 1);
            assert!(r.m >= 0.0 && r.g >= 0.0 && r.c > 0.0);
            assert_eq!(r.j, r.m + ALPHA * r.g + r.c);
        }
    }

    #[test]
    fn ema_tracks_trainable_arrays_only() {
        let mut live = ParamStore::new();
        let t = live.insert("t", ParamKind::Trainable, Tensor::full(&[1], 1.0));
        let f = live.insert("f", ParamKind::Frozen, Tensor::full(&[1], 1.0));
        let b = live.insert("b", ParamKind::Buffer, Tensor::full(&[1], 1.0));
        let mut ema = live.clone();
        for id in [t, f, b] {
            ema.get_mut(id).data_mut()[0] = 0.0;
        }
        for _ in 0..5000 {
            ema_update(&mut ema, &live, 0.999);
        }
        assert!((ema.get(t).data()[0] - (1.0 - 0.999f64.powi(5000))).abs() < 1e-12);
        assert_eq!(ema.get(f).data()[0], 0.0);
        assert_eq!(ema.get(b).data()[0], 1.0);
    }

    #[test]
    fn checkpoint_restores_model() {
        let (s, objs) = setup(4, 2);
        let run = train(&s, &objs, |_, _| {}).unwrap();
        let bytes = run.final_checkpoint().to_bytes().unwrap();
        let back = Checkpoint::<CheckpointMeta>::from_bytes(&bytes, std::path::Path::new("m")).unwrap();
        let r = restore(&back).unwrap();
        assert_eq!(r.state, run.state);
        assert_eq!(r.meta.case, run.case);
        let a = evaluate(&run.model, &run.state.ema, &objs, 1.0, 3).unwrap();
        let b = evaluate(&r.model, &r.state.ema, &objs, 1.0, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.samples, 16);
    }

    #[test]
    fn restore_rejects_mismatched_arrays() {
        let (s, objs) = setup(1, 0);
        let run = train(&s, &objs, |_, _| {}).unwrap();
        let mut ck = run.final_checkpoint();
        ck.stores[0].1 = ParamStore::new();
        assert!(restore(&ck).is_err());
    }

    #[test]
    fn noiseless_evaluation_is_seed_independent() {
        let (s, objs) = setup(1, 0);
        let run = train(&s, &objs, |_, _| {}).unwrap();
        let a = evaluate(&run.model, &run.state.ema, &objs, f64::INFINITY, 1).unwrap();
        let b = evaluate(&run.model, &run.state.ema, &objs, f64::INFINITY, 2).unwrap();
        assert_eq!(a, b);
        let c = evaluate(&run.model, &run.state.ema, &objs, 1.0, 1).unwrap();
        assert_ne!(a.mean_m, c.mean_m);
        assert_eq!(Preset::Table3.config(), s.config);
    }
}
