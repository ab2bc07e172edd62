//! Gradient-projection influence estimates.
//!
//! Sign convention: a positive step influence means a predicted loss
//! *decrease* on the evaluation example. With `θ' = θ − η∇ℓ(z)` a first-order
//! expansion gives `ℓ(z₀;θ) − ℓ(z₀;θ') ≈ η⟨∇ℓ(z), ∇ℓ(z₀)⟩`, so
//! [`step_influence`] returns `+η⟨·,·⟩`.

use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use fnv::FnvHasher;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::{completion_loss, example_gradient_in, loss_and_grad, Example, GradScope, GradientVector, ModelState};
use crate::tensor::TensorError;
use crate::trainer::{apply_update, CheckpointSeries};

/// Evaluation gradients with squared norm at or below this are rejected.
pub const DEGENERATE_EPS: f64 = 1e-30;

/// Sequential-order inner product.
pub fn dot_values(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in a.iter().zip(b) {
        acc += x * y;
    }
    acc
}

fn check_pair(a: &GradientVector, b: &GradientVector) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "gradient lengths {} ({}) and {} ({})",
            a.len(),
            a.example_id,
            b.len(),
            b.example_id
        )));
    }
    if a.run_id != b.run_id || a.step != b.step {
        return Err(Error::Provenance(format!(
            "gradients from {}@{} and {}@{}",
            a.run_id, a.step, b.run_id, b.step
        )));
    }
    Ok(())
}

pub fn dot(a: &GradientVector, b: &GradientVector) -> Result<f64> {
    check_pair(a, b)?;
    Ok(dot_values(&a.values, &b.values))
}

/// Predicted loss decrease on `z0` from one SGD step on `z` at rate `lr`.
pub fn step_influence(g_z: &GradientVector, g_z0: &GradientVector, lr: f64) -> Result<f64> {
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be non-negative")));
    }
    Ok(lr * dot(g_z, g_z0)?)
}

fn rel_inf_at(g_z: &GradientVector, g_z0: &GradientVector, index: usize) -> Result<f64> {
    check_pair(g_z, g_z0)?;
    let norm_sq = dot_values(&g_z0.values, &g_z0.values);
    if norm_sq <= DEGENERATE_EPS {
        return Err(Error::ZeroEvalGradient { index, norm_sq });
    }
    Ok(dot_values(&g_z.values, &g_z0.values) / norm_sq)
}

/// `⟨g_z, g_z0⟩ / ⟨g_z0, g_z0⟩`: the effect of a step on `z` relative to a
/// step on `z0` itself.
pub fn rel_inf(g_z: &GradientVector, g_z0: &GradientVector) -> Result<f64> {
    rel_inf_at(g_z, g_z0, 0)
}

/// Probe set and evaluation set, paired by index.
#[derive(Debug, Clone, PartialEq)]
pub struct PairedSets {
    pub probes: Vec<Example>,
    pub evals: Vec<Example>,
}

impl PairedSets {
    pub fn new(probes: Vec<Example>, evals: Vec<Example>) -> Result<Self> {
        if probes.len() != evals.len() {
            return Err(Error::Size(format!(
                "{} probes vs {} evals",
                probes.len(),
                evals.len()
            )));
        }
        if probes.is_empty() {
            return Err(Error::Size("paired sets must not be empty".into()));
        }
        Ok(Self { probes, evals })
    }

    pub fn len(&self) -> usize {
        self.probes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probes.is_empty()
    }
}

/// `M[i][j] = RelInf(probe_i, eval_j)`.
pub fn rel_inf_matrix(probes: &[Arc<GradientVector>], evals: &[Arc<GradientVector>]) -> Result<Vec<Vec<f64>>> {
    probes
        .iter()
        .map(|p| {
            evals
                .iter()
                .enumerate()
                .map(|(j, e)| rel_inf_at(p, e, j))
                .collect()
        })
        .collect()
}

/// Average in-task score, computed straight from paired gradients.
pub fn s_in_from_grads(probes: &[Arc<GradientVector>], evals: &[Arc<GradientVector>]) -> Result<f64> {
    if probes.len() != evals.len() || probes.is_empty() {
        return Err(Error::Size(format!("{} probes vs {} evals", probes.len(), evals.len())));
    }
    let mut sum = 0.0;
    for (i, (p, e)) in probes.iter().zip(evals).enumerate() {
        sum += rel_inf_at(p, e, i)?;
    }
    Ok(sum / probes.len() as f64)
}

/// Average cross-task score over all `i ≠ j` pairs.
pub fn s_cross_from_grads(probes: &[Arc<GradientVector>], evals: &[Arc<GradientVector>]) -> Result<f64> {
    let n = probes.len();
    if n != evals.len() {
        return Err(Error::Size(format!("{n} probes vs {} evals", evals.len())));
    }
    if n < 2 {
        return Err(Error::Size(format!("cross-task score needs n >= 2, got {n}")));
    }
    let mut sum = 0.0;
    for (i, p) in probes.iter().enumerate() {
        for (j, e) in evals.iter().enumerate() {
            if i != j {
                sum += rel_inf_at(p, e, j)?;
            }
        }
    }
    Ok(sum / (n * (n - 1)) as f64)
}

/// Mean of the diagonal of a square matrix.
pub fn diagonal_mean(m: &[Vec<f64>]) -> f64 {
    let mut sum = 0.0;
    for (i, row) in m.iter().enumerate() {
        sum += row[i];
    }
    sum / m.len() as f64
}

/// Mean of the off-diagonal entries; `None` below 2×2.
pub fn off_diagonal_mean(m: &[Vec<f64>]) -> Option<f64> {
    let n = m.len();
    if n < 2 {
        return None;
    }
    let mut sum = 0.0;
    for (i, row) in m.iter().enumerate() {
        for (j, v) in row.iter().enumerate() {
            if i != j {
                sum += v;
            }
        }
    }
    Some(sum / (n * (n - 1)) as f64)
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
struct CacheKey {
    run_id: String,
    step: u64,
    example_id: String,
    state_hash: u64,
    example_hash: u64,
}

fn example_hash(z: &Example) -> u64 {
    let mut h = FnvHasher::default();
    z.hash(&mut h);
    h.finish()
}

/// Per-(run, step, example) gradient store, additionally keyed by the
/// checkpoint's content hash so a changed state never reuses a stale entry.
#[derive(Debug, Default)]
pub struct GradientCache {
    scope: GradScope,
    map: Mutex<HashMap<CacheKey, Arc<GradientVector>>>,
    computed: AtomicUsize,
}

impl GradientCache {
    pub fn new(scope: GradScope) -> Self {
        Self {
            scope,
            ..Self::default()
        }
    }

    pub fn scope(&self) -> GradScope {
        self.scope
    }

    /// Number of gradients actually computed (cache misses).
    pub fn computed(&self) -> usize {
        self.computed.load(Ordering::Relaxed)
    }

    /// Gradients for `examples` at `state`, in input order. Missing entries
    /// are computed in parallel.
    pub fn gradients(&self, run_id: &str, state: &ModelState, examples: &[Example]) -> Result<Vec<Arc<GradientVector>>> {
        let state_hash = state.fingerprint();
        let keys: Vec<CacheKey> = examples
            .iter()
            .map(|z| CacheKey {
                run_id: run_id.to_string(),
                step: state.step,
                example_id: z.id.clone(),
                state_hash,
                example_hash: example_hash(z),
            })
            .collect();
        let missing: Vec<usize> = {
            let map = self.map.lock().expect("gradient cache poisoned");
            let mut seen = std::collections::HashSet::new();
            (0..examples.len())
                .filter(|&i| !map.contains_key(&keys[i]) && seen.insert(&keys[i]))
                .collect()
        };
        let fresh: Vec<(usize, GradientVector)> = missing
            .par_iter()
            .map(|&i| Ok((i, example_gradient_in(state, &examples[i], run_id, self.scope)?)))
            .collect::<Result<_>>()?;
        let mut map = self.map.lock().expect("gradient cache poisoned");
        for (i, g) in fresh {
            self.computed.fetch_add(1, Ordering::Relaxed);
            map.insert(keys[i].clone(), Arc::new(g));
        }
        Ok(keys.iter().map(|k| Arc::clone(&map[k])).collect())
    }
}

fn set_grads(
    sets: &PairedSets,
    state: &ModelState,
    run_id: &str,
    cache: &GradientCache,
) -> Result<(Vec<Arc<GradientVector>>, Vec<Arc<GradientVector>>)> {
    let mut all = sets.probes.clone();
    all.extend(sets.evals.iter().cloned());
    let mut grads = cache.gradients(run_id, state, &all)?;
    let evals = grads.split_off(sets.len());
    Ok((grads, evals))
}

/// Average in-task influence of the probes on their paired evals at `state`.
pub fn s_in(sets: &PairedSets, state: &ModelState, run_id: &str, cache: &GradientCache) -> Result<f64> {
    let (p, e) = set_grads(sets, state, run_id, cache)?;
    s_in_from_grads(&p, &e)
}

/// Average cross-task influence of the probes on the other evals at `state`.
pub fn s_cross(sets: &PairedSets, state: &ModelState, run_id: &str, cache: &GradientCache) -> Result<f64> {
    if sets.len() < 2 {
        return Err(Error::Size(format!("cross-task score needs n >= 2, got {}", sets.len())));
    }
    let (p, e) = set_grads(sets, state, run_id, cache)?;
    s_cross_from_grads(&p, &e)
}

/// Names a probe-set/eval-set pairing, e.g. probe `CoT`, target `non-CoT`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MetricLabel {
    pub probe: String,
    pub target: String,
}

impl MetricLabel {
    pub fn new(probe: impl Into<String>, target: impl Into<String>) -> Self {
        Self {
            probe: probe.into(),
            target: target.into(),
        }
    }

    pub fn in_task_name(&self) -> String {
        format!("{}→In-task {}", self.probe, self.target)
    }

    pub fn cross_task_name(&self) -> String {
        format!("{}→Cross-task {}", self.probe, self.target)
    }

    pub fn pair_name(&self) -> String {
        format!("{}→{}", self.probe, self.target)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceRecord {
    pub step: u64,
    pub matrix: Vec<Vec<f64>>,
    pub s_in: f64,
    /// Absent when the sets hold a single pair.
    pub s_cross: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InfluenceTrace {
    pub run_id: String,
    pub label: MetricLabel,
    pub records: Vec<InfluenceRecord>,
}

impl InfluenceTrace {
    /// Recomputes both aggregates from each stored matrix and compares
    /// bit for bit against the directly computed values.
    pub fn aggregates_consistent(&self) -> bool {
        self.records.iter().all(|r| {
            diagonal_mean(&r.matrix).to_bits() == r.s_in.to_bits()
                && off_diagonal_mean(&r.matrix).map(f64::to_bits) == r.s_cross.map(f64::to_bits)
        })
    }
}

/// Flattens traces into `(step, metric, value)` rows, grouped by step and
/// keeping trace order within a step.
pub fn trace_rows(traces: &[InfluenceTrace]) -> Vec<(u64, String, f64)> {
    let mut steps: Vec<u64> = traces.iter().flat_map(|t| t.records.iter().map(|r| r.step)).collect();
    steps.sort_unstable();
    steps.dedup();
    let mut rows = Vec::new();
    for step in steps {
        for t in traces {
            for r in t.records.iter().filter(|r| r.step == step) {
                rows.push((step, t.label.in_task_name(), r.s_in));
                if let Some(c) = r.s_cross {
                    rows.push((step, t.label.cross_task_name(), c));
                }
            }
        }
    }
    rows
}

/// RelInf matrix and aggregates at every checkpoint of `series`.
pub fn trace(sets: &PairedSets, series: &CheckpointSeries, label: MetricLabel, cache: &GradientCache) -> Result<InfluenceTrace> {
    if series.checkpoints.is_empty() {
        return Err(Error::Size("checkpoint series is empty".into()));
    }
    let mut records = Vec::with_capacity(series.checkpoints.len());
    for ck in &series.checkpoints {
        let at = |e: Error| e.at_step(ck.step);
        let (p, e) = set_grads(sets, &ck.state, &series.run_id, cache).map_err(at)?;
        let matrix = rel_inf_matrix(&p, &e).map_err(at)?;
        let s_in = s_in_from_grads(&p, &e).map_err(at)?;
        let s_cross = if sets.len() >= 2 {
            Some(s_cross_from_grads(&p, &e).map_err(at)?)
        } else {
            None
        };
        records.push(InfluenceRecord {
            step: ck.step,
            matrix,
            s_in,
            s_cross,
        });
    }
    Ok(InfluenceTrace {
        run_id: series.run_id.clone(),
        label,
        records,
    })
}

/// One batch-size-1 replay of training on `z`, observed on `z0`.
#[derive(Debug, Clone, PartialEq)]
pub struct TracInReplay {
    /// `ℓ(z0; θ_t)` for `t = 0..=T`.
    pub eval_losses: Vec<f64>,
    /// Measured step influences `ℓ(z0;θ_t) − ℓ(z0;θ_{t+1})`.
    pub measured_terms: Vec<f64>,
    /// Predicted step influences `η_t⟨∇ℓ(z;θ_t), ∇ℓ(z0;θ_t)⟩`.
    pub approx_terms: Vec<f64>,
}

impl TracInReplay {
    pub fn measured(&self) -> f64 {
        self.measured_terms.iter().sum()
    }

    pub fn approx(&self) -> f64 {
        self.approx_terms.iter().sum()
    }

    pub fn endpoint_delta(&self) -> f64 {
        self.eval_losses[0] - self.eval_losses[self.eval_losses.len() - 1]
    }
}

pub fn tracin_replay(z: &Example, z0: &Example, state0: &ModelState, lrs: &[f64]) -> Result<TracInReplay> {
    if let Some(bad) = lrs.iter().find(|l| !(**l >= 0.0 && l.is_finite())) {
        return Err(Error::Config(format!("learning rate {bad} must be non-negative")));
    }
    let diverged = |step: u64| {
        move |e: Error| match e {
            Error::Tensor(TensorError::Numeric(m)) => Error::Diverged { step, reason: m },
            other => other,
        }
    };
    let mut state = state0.clone();
    let mut eval_losses = vec![completion_loss(&state, z0)?];
    let mut measured_terms = Vec::with_capacity(lrs.len());
    let mut approx_terms = Vec::with_capacity(lrs.len());
    for (t, &lr) in lrs.iter().enumerate() {
        let step = state.step;
        let gz = loss_and_grad(&state, z, GradScope::Adapters, None).map_err(diverged(step))?;
        let gz0 = loss_and_grad(&state, z0, GradScope::Adapters, None).map_err(diverged(step))?;
        approx_terms.push(lr * dot_values(&gz.grad, &gz0.grad));
        state = apply_update(&state, &gz.grad, lr).map_err(diverged(step))?;
        let after = completion_loss(&state, z0).map_err(diverged(step))?;
        measured_terms.push(eval_losses[t] - after);
        eval_losses.push(after);
    }
    Ok(TracInReplay {
        eval_losses,
        measured_terms,
        approx_terms,
    })
}

/// Sum of measured step influences of `z` on `z0` while training on `z`
/// alone with the given per-step learning rates.
pub fn tracin_measured(z: &Example, z0: &Example, state0: &ModelState, lrs: &[f64]) -> Result<f64> {
    Ok(tracin_replay(z, z0, state0, lrs)?.measured())
}

/// First-order estimate of [`tracin_measured`] along the same replay.
pub fn tracin_approx(z: &Example, z0: &Example, state0: &ModelState, lrs: &[f64]) -> Result<f64> {
    Ok(tracin_replay(z, z0, state0, lrs)?.approx())
}
