//! Denoiser training: weighted denoising loss over stratified noise
//! levels, Adam with warmup and cosine decay, unit-norm gradient clipping,
//! an EMA shadow and random circular-shift augmentation.

use dsk_tensor::{ParamMap, Tape, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::diffusion::VpSchedule;
use crate::error::{check_dim, invalid, CoreError, Result};
use crate::field::{roll, Samples};
use crate::net::{denoiser_forward, Bound, DenoiserModel};
use crate::rng::stage_rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub warmup_steps: usize,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub clip_norm: f64,
    pub ema_decay: f64,
    /// Size of the fixed validation batch.
    pub val_size: usize,
    /// Validation loss is recorded every this many steps (and at the end).
    pub val_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 32,
            steps: 20_000,
            warmup_steps: 1000,
            lr_peak: 1e-3,
            lr_final: 1e-6,
            clip_norm: 1.0,
            ema_decay: 0.95,
            val_size: 256,
            val_every: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.val_size == 0 || self.val_every == 0 {
            return Err(invalid("batch, val_size and val_every must be positive"));
        }
        if !(self.lr_peak > 0.0) || !(self.lr_final > 0.0) || !(self.clip_norm > 0.0) {
            return Err(invalid("learning rates and clip norm must be positive"));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(invalid(format!("ema_decay must lie in [0, 1), got {}", self.ema_decay)));
        }
        Ok(())
    }

    /// Linear ramp to `lr_peak` over the warmup, then cosine decay to
    /// `lr_final` at the last step.
    pub fn learning_rate(&self, step: usize) -> f64 {
        if step < self.warmup_steps {
            return self.lr_peak * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.steps.saturating_sub(self.warmup_steps).max(1);
        let progress = ((step - self.warmup_steps) as f64 / span as f64).min(1.0);
        self.lr_final + 0.5 * (self.lr_peak - self.lr_final) * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

/// A fixed set of noised examples: clean rows, noise levels and noisy
/// inputs `x̂ = x_0 + σ ε`.
#[derive(Clone, Debug)]
pub struct LossBatch {
    pub clean: Samples,
    pub sigmas: Vec<f64>,
    pub noisy: Samples,
}

impl LossBatch {
    /// Stratified times over `[ε_t, 1]` and fresh Gaussian noise.
    pub fn draw(schedule: &VpSchedule, clean: Samples, rng: &mut ChaCha8Rng) -> Result<Self> {
        if clean.is_empty() {
            return Err(invalid("loss batch is empty"));
        }
        let times = schedule.stratified_times(clean.len(), rng);
        let sigmas = times.iter().map(|t| schedule.sigma(*t)).collect::<Result<Vec<_>>>()?;
        let mut noisy = Vec::with_capacity(clean.data().len());
        for (row, s) in clean.rows().zip(&sigmas) {
            for x in row {
                noisy.push(x + s * rng.sample::<f64, _>(StandardNormal));
            }
        }
        Ok(Self {
            noisy: Samples::new(clean.dim(), noisy)?,
            clean,
            sigmas,
        })
    }
}

/// `Σ_i λ(σ_i) ‖D(x̂_i, σ_i) − x_{0,i}‖²` on a tape; returns the loss and,
/// when `trainable`, the parameter gradients.
pub fn denoising_loss(model: &DenoiserModel, params: &ParamMap, batch: &LossBatch, trainable: bool) -> Result<(f64, Option<ParamMap>)> {
    check_dim("training field", model.config.length, batch.clean.dim())?;
    let (n, d) = (batch.clean.len(), batch.clean.dim());
    let mut tape = Tape::new();
    let p = Bound::new(&mut tape, params, trainable);
    let x = tape.constant(Tensor::new(vec![n, 1, d], batch.noisy.data().to_vec())?);
    let target = tape.constant(Tensor::new(vec![n, 1, d], batch.clean.data().to_vec())?);
    let out = denoiser_forward(&model.config, &mut tape, &p, x, &batch.sigmas)?;
    let resid = tape.sub(out, target)?;
    let weights: Vec<f64> = batch.sigmas.iter().map(|s| VpSchedule::loss_weight(*s, 1.0).sqrt()).collect();
    let weighted = tape.scale_batch(resid, &weights)?;
    let loss = tape.sum_sq(weighted)?;
    let value = tape.value(loss).item()?;
    if !trainable {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    let mut out = ParamMap::new();
    for (name, var) in p.iter() {
        out.insert(name.clone(), grads.wrt(*var));
    }
    Ok((value, Some(out)))
}

/// Validation loss per sample and coordinate, using the EMA weights.
pub fn validation_loss(model: &DenoiserModel, batch: &LossBatch) -> Result<f64> {
    let (l, _) = denoising_loss(model, &model.ema, batch, false)?;
    Ok(l / (batch.clean.len() * batch.clean.dim()) as f64)
}

struct Adam {
    m: ParamMap,
    v: ParamMap,
    t: i32,
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl Adam {
    fn new(params: &ParamMap) -> Self {
        let zeros: ParamMap = params.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, params: &mut ParamMap, grads: &ParamMap, lr: f64) {
        self.t += 1;
        let (c1, c2) = (1.0 - BETA1.powi(self.t), 1.0 - BETA2.powi(self.t));
        for (name, p) in params.iter_mut() {
            let g = grads[name].data();
            let m = self.m.get_mut(name).expect("moment exists").data_mut();
            let v = self.v.get_mut(name).expect("moment exists").data_mut();
            for (((p, g), m), v) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + ADAM_EPS);
            }
        }
    }
}

/// Scales `grads` to global norm at most `max_norm`; returns the norm
/// before clipping.
pub fn clip_gradients(grads: &mut ParamMap, max_norm: f64) -> f64 {
    let norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
    if norm > max_norm {
        let k = max_norm / norm;
        for t in grads.values_mut() {
            t.data_mut().iter_mut().for_each(|g| *g *= k);
        }
    }
    norm
}

pub fn ema_update(ema: &mut ParamMap, params: &ParamMap, decay: f64) {
    for (name, e) in ema.iter_mut() {
        for (e, p) in e.data_mut().iter_mut().zip(params[name].data()) {
            *e = decay * *e + (1.0 - decay) * p;
        }
    }
}

/// Draws `n` rows with replacement, each rolled by a uniform random shift.
pub fn augmented_batch(data: &Samples, n: usize, rng: &mut ChaCha8Rng) -> Result<Samples> {
    let d = data.dim();
    let rows = (0..n).map(|_| {
        let i = rng.random_range(0..data.len());
        let shift = rng.random_range(0..d) as isize;
        roll(data.row(i), shift)
    });
    Samples::from_rows(d, rows)
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct TrainReport {
    /// `(step, validation loss)`; step 0 is before any update.
    pub validation: Vec<(usize, f64)>,
    /// Last training-batch loss, per sample and coordinate like the validation loss.
    pub final_train_loss: f64,
}

/// Numerical failures inside a loss evaluation become a step-indexed abort.
fn at_step(step: usize) -> impl Fn(CoreError) -> CoreError {
    move |e| {
        if e.is_numerical() {
            CoreError::NonFinite { what: "training loss", step }
        } else {
            e
        }
    }
}

/// Trains `model` in place on standardized fields `data`.
pub fn train(model: &mut DenoiserModel, data: &Samples, schedule: &VpSchedule, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    check_dim("training data", model.config.length, data.dim())?;
    if data.is_empty() {
        return Err(invalid("training set is empty"));
    }
    let mut val_rng = stage_rng(cfg.seed, "validation", 0);
    let val_rows = augmented_batch(data, cfg.val_size, &mut val_rng)?;
    let val = LossBatch::draw(schedule, val_rows, &mut val_rng)?;
    let mut rng = stage_rng(cfg.seed, "train", 0);
    let mut adam = Adam::new(&model.params);
    let mut report = TrainReport::default();
    report.validation.push((0, validation_loss(model, &val).map_err(at_step(0))?));
    for step in 0..cfg.steps {
        let rows = augmented_batch(data, cfg.batch, &mut rng)?;
        let batch = LossBatch::draw(schedule, rows, &mut rng)?;
        let (loss, grads) = denoising_loss(model, &model.params, &batch, true).map_err(at_step(step))?;
        if !loss.is_finite() {
            return Err(CoreError::NonFinite { what: "training loss", step });
        }
        let mut grads = grads.expect("trainable pass returns gradients");
        clip_gradients(&mut grads, cfg.clip_norm);
        adam.step(&mut model.params, &grads, cfg.learning_rate(step));
        ema_update(&mut model.ema, &model.params, cfg.ema_decay);
        let loss = loss / (batch.clean.len() * batch.clean.dim()) as f64;
        report.final_train_loss = loss;
        let done = step + 1;
        if done % cfg.val_every == 0 || done == cfg.steps {
            let v = validation_loss(model, &val).map_err(at_step(done))?;
            log::info!("step {done}: train loss {loss:.4e}, validation {v:.4e}");
            report.validation.push((done, v));
        }
    }
    Ok(report)
}
