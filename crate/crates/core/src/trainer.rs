//! Minibatch SGD over the adapter parameters with a warmup + linear-decay
//! learning-rate schedule and periodic checkpoints.

use std::hash::Hasher;
use std::sync::Arc;

use fnv::FnvHasher;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{loss_and_grad, Example, GradScope, ModelState};
use crate::tensor::TensorError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_steps: u64,
    pub checkpoint_stride: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    /// Desk-scale defaults. The learning rates are larger than the
    /// large-model values because plain SGD on a summed loss needs them to
    /// move a randomly initialized model.
    fn default() -> Self {
        Self {
            epochs: 6,
            batch_size: 8,
            lr_peak: 3e-3,
            lr_final: 3e-5,
            warmup_steps: 10,
            checkpoint_stride: 50,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings of the original 7B instruction-tuning run.
    pub fn paper_scale() -> Self {
        Self {
            epochs: 6,
            batch_size: 32,
            lr_peak: 1e-5,
            lr_final: 1e-7,
            warmup_steps: 10,
            checkpoint_stride: 50,
            seed: 0,
        }
    }

    pub fn steps_per_epoch(&self, n_examples: usize) -> u64 {
        n_examples.div_ceil(self.batch_size.max(1)) as u64
    }

    pub fn total_steps(&self, n_examples: usize) -> u64 {
        self.epochs as u64 * self.steps_per_epoch(n_examples)
    }

    pub fn schedule(&self, n_examples: usize) -> Schedule {
        Schedule {
            peak: self.lr_peak,
            last: self.lr_final,
            warmup: self.warmup_steps,
            final_step: self.total_steps(n_examples).saturating_sub(1),
        }
    }

    pub fn validate(&self, n_examples: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if n_examples == 0 {
            return bad("training data is empty".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if !(self.lr_peak > self.lr_final && self.lr_final > 0.0 && self.lr_peak.is_finite()) {
            return bad(format!(
                "need lr_peak > lr_final > 0, got {} and {}",
                self.lr_peak, self.lr_final
            ));
        }
        if self.checkpoint_stride == 0 {
            return bad("checkpoint_stride must be at least 1".into());
        }
        let total = self.total_steps(n_examples);
        if total > 0 && self.warmup_steps >= total {
            return bad(format!(
                "warmup_steps {} must be below total steps {total}",
                self.warmup_steps
            ));
        }
        Ok(())
    }
}

/// Linear ramp from zero to `peak` over `warmup` steps, then linear decay
/// reaching `last` at `final_step`, constant afterwards.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Schedule {
    pub peak: f64,
    pub last: f64,
    pub warmup: u64,
    pub final_step: u64,
}

impl Schedule {
    pub fn lr_at(&self, step: u64) -> f64 {
        if step < self.warmup {
            return self.peak * step as f64 / self.warmup as f64;
        }
        if step >= self.final_step {
            return self.last;
        }
        let frac = (step - self.warmup) as f64 / (self.final_step - self.warmup) as f64;
        self.peak + (self.last - self.peak) * frac
    }
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub step: u64,
    pub state: Arc<ModelState>,
}

#[derive(Debug, Clone)]
pub struct CheckpointSeries {
    pub run_id: String,
    pub checkpoints: Vec<Checkpoint>,
    /// Learning rate applied at each step `0..total`.
    pub lr_schedule: Vec<f64>,
}

impl CheckpointSeries {
    pub fn single(run_id: impl Into<String>, state: ModelState) -> Self {
        Self {
            run_id: run_id.into(),
            checkpoints: vec![Checkpoint {
                step: state.step,
                state: Arc::new(state),
            }],
            lr_schedule: Vec::new(),
        }
    }

    pub fn last(&self) -> Option<&Checkpoint> {
        self.checkpoints.last()
    }

    pub fn steps(&self) -> Vec<u64> {
        self.checkpoints.iter().map(|c| c.step).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    pub step: u64,
    pub loss: f64,
    pub lr: f64,
}

impl std::fmt::Display for StepLog {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "step={} loss={} lr={}", self.step, self.loss, self.lr)
    }
}

/// Example order for one epoch: Fisher–Yates driven by a seed derived from
/// `(seed, epoch)`.
pub fn epoch_order(seed: u64, epoch: u64, n: usize) -> Vec<usize> {
    let mut h = FnvHasher::default();
    h.write_u64(seed);
    h.write_u64(epoch);
    let mut rng = ChaCha8Rng::seed_from_u64(h.finish());
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

/// Mean loss and mean gradient over a batch. Per-example work runs in
/// parallel; the reduction follows batch order.
pub fn batch_gradient(state: &ModelState, batch: &[&Example], scope: GradScope) -> Result<(f64, Vec<f64>)> {
    let parts: Vec<_> = batch
        .par_iter()
        .map(|z| loss_and_grad(state, z, scope, None))
        .collect::<Result<_>>()?;
    let n = parts.len() as f64;
    let mut loss = 0.0;
    let mut grad = vec![0.0; parts.first().map_or(0, |p| p.grad.len())];
    for p in &parts {
        loss += p.loss;
        for (a, b) in grad.iter_mut().zip(&p.grad) {
            *a += b;
        }
    }
    for g in &mut grad {
        *g /= n;
    }
    Ok((loss / n, grad))
}

fn diverged(step: u64, e: Error) -> Error {
    match e {
        Error::Tensor(TensorError::Numeric(m)) => Error::Diverged { step, reason: m },
        other => other,
    }
}

/// Adapter update `θ ← θ − η·g`; the result carries step `state.step + 1`.
pub fn apply_update(state: &ModelState, grad: &[f64], lr: f64) -> Result<ModelState> {
    let mut next = state.clone();
    let params: Vec<f64> = state
        .adapter_vector()
        .iter()
        .zip(grad)
        .map(|(p, g)| p - lr * g)
        .collect();
    next.set_param_vector(GradScope::Adapters, &params)?;
    next.step = state.step + 1;
    Ok(next)
}

/// One batch-size-1 SGD step on `z`.
pub fn single_sgd_step(state: &ModelState, z: &Example, lr: f64) -> Result<ModelState> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be non-negative")));
    }
    let lg = loss_and_grad(state, z, GradScope::Adapters, None)?;
    apply_update(state, &lg.grad, lr)
}

/// Trains from `state0` (normally step 0) to the end of the schedule.
pub fn train(
    state0: &ModelState,
    data: &[Example],
    cfg: &TrainConfig,
    run_id: &str,
    on_step: impl FnMut(&StepLog),
) -> Result<CheckpointSeries> {
    let total = cfg.total_steps(data.len());
    train_until(state0, data, cfg, run_id, total, on_step)
}

/// Trains from `start.step` up to `until`. Shuffles depend only on the seed
/// and epoch, so resuming from any checkpoint reproduces the uninterrupted run.
pub fn train_until(
    start: &ModelState,
    data: &[Example],
    cfg: &TrainConfig,
    run_id: &str,
    until: u64,
    mut on_step: impl FnMut(&StepLog),
) -> Result<CheckpointSeries> {
    cfg.validate(data.len())?;
    for z in data {
        z.validate(&start.config)?;
    }
    let total = cfg.total_steps(data.len());
    if until > total || start.step > until {
        return Err(Error::Config(format!(
            "cannot train from step {} to {until} in a {total}-step run",
            start.step
        )));
    }
    let schedule = cfg.schedule(data.len());
    let spe = cfg.steps_per_epoch(data.len());
    let mut series = CheckpointSeries {
        run_id: run_id.to_string(),
        checkpoints: vec![Checkpoint {
            step: start.step,
            state: Arc::new(start.clone()),
        }],
        lr_schedule: (0..total).map(|t| schedule.lr_at(t)).collect(),
    };
    let mut state = start.clone();
    let mut order: Option<(u64, Vec<usize>)> = None;
    for step in start.step..until {
        let epoch = step / spe;
        if order.as_ref().map_or(true, |(e, _)| *e != epoch) {
            order = Some((epoch, epoch_order(cfg.seed, epoch, data.len())));
        }
        let idx = &order.as_ref().expect("set above").1;
        let k = (step % spe) as usize * cfg.batch_size;
        let batch: Vec<&Example> = idx[k..(k + cfg.batch_size).min(data.len())]
            .iter()
            .map(|&i| &data[i])
            .collect();
        let (loss, grad) = batch_gradient(&state, &batch, GradScope::Adapters).map_err(|e| diverged(step, e))?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                reason: format!("batch loss {loss}"),
            });
        }
        let lr = schedule.lr_at(step);
        on_step(&StepLog { step, loss, lr });
        state = apply_update(&state, &grad, lr).map_err(|e| diverged(step, e))?;
        let t = state.step;
        if t % cfg.checkpoint_stride == 0 || t == until {
            series.checkpoints.push(Checkpoint {
                step: t,
                state: Arc::new(state.clone()),
            });
        }
    }
    Ok(series)
}

/// Full-parameter SGD on the base weights only, used to give the frozen
/// base some competence before adapter tuning. Adapters and step are kept.
pub fn pretrain_base(
    state: &ModelState,
    data: &[Example],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&StepLog),
) -> Result<ModelState> {
    cfg.validate(data.len())?;
    let schedule = cfg.schedule(data.len());
    let spe = cfg.steps_per_epoch(data.len());
    let n_adapter = state.adapter_len();
    let mut cur = state.clone();
    for step in 0..cfg.total_steps(data.len()) {
        let epoch = step / spe;
        let idx = epoch_order(cfg.seed ^ 0x5eed_ba5e, epoch, data.len());
        let k = (step % spe) as usize * cfg.batch_size;
        let batch: Vec<&Example> = idx[k..(k + cfg.batch_size).min(data.len())]
            .iter()
            .map(|&i| &data[i])
            .collect();
        let (loss, grad) = batch_gradient(&cur, &batch, GradScope::All).map_err(|e| diverged(step, e))?;
        let lr = schedule.lr_at(step);
        on_step(&StepLog { step, loss, lr });
        let mut params = cur.param_vector(GradScope::All);
        for (p, g) in params[n_adapter..].iter_mut().zip(&grad[n_adapter..]) {
            *p -= lr * g;
        }
        cur.set_param_vector(GradScope::All, &params)
            .map_err(|e| diverged(step, e))?;
    }
    Ok(cur)
}
