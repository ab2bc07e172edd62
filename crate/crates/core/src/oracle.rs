//! Ground-truth checks by actually taking the SGD steps the estimates
//! predict.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{rel_inf_matrix, s_in_from_grads, step_influence, GradientCache, PairedSets};
use crate::model::{completion_loss, example_gradient, Example, GradScope, ModelState};
use crate::tensor::TensorError;
use crate::trainer::{apply_update, batch_gradient, single_sgd_step, CheckpointSeries};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaylorRecord {
    pub predicted: f64,
    pub measured: f64,
    pub rel_error: f64,
}

fn numeric_to_diverged(step: u64) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::Tensor(TensorError::Numeric(m)) => Error::Diverged { step, reason: m },
        other => other,
    }
}

/// Predicted vs measured loss change on `z0` after one SGD step on `z`.
pub fn taylor_check(state: &ModelState, z: &Example, z0: &Example, lr: f64) -> Result<TaylorRecord> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {lr} must be positive")));
    }
    let div = numeric_to_diverged(state.step);
    let g = example_gradient(state, z, "oracle").map_err(&div)?;
    let g0 = example_gradient(state, z0, "oracle").map_err(&div)?;
    let predicted = step_influence(&g, &g0, lr)?;
    let before = completion_loss(state, z0).map_err(&div)?;
    let after = completion_loss(&single_sgd_step(state, z, lr).map_err(&div)?, z0).map_err(&div)?;
    let measured = before - after;
    if !measured.is_finite() {
        return Err(Error::Diverged {
            step: state.step,
            reason: format!("loss change {measured}"),
        });
    }
    let rel_error = (predicted - measured).abs() / measured.abs().max(1e-12);
    Ok(TaylorRecord {
        predicted,
        measured,
        rel_error,
    })
}

/// A sampled `(z, z0, checkpoint)` index triple.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Triple {
    pub z: usize,
    pub z0: usize,
    pub checkpoint: usize,
}

/// `count` triples with `z ≠ z0` drawn uniformly from `n_examples` examples
/// and `n_checkpoints` checkpoints.
pub fn random_triples(n_examples: usize, n_checkpoints: usize, count: usize, seed: u64) -> Result<Vec<Triple>> {
    if n_examples < 2 || n_checkpoints == 0 {
        return Err(Error::Size(format!(
            "need at least 2 examples and 1 checkpoint, got {n_examples} and {n_checkpoints}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..count)
        .map(|_| {
            let z = rng.gen_range(0..n_examples);
            let mut z0 = rng.gen_range(0..n_examples - 1);
            if z0 >= z {
                z0 += 1;
            }
            Triple {
                z,
                z0,
                checkpoint: rng.gen_range(0..n_checkpoints),
            }
        })
        .collect())
}

/// Runs [`taylor_check`] on every triple in parallel, in input order.
pub fn taylor_batch(data: &[Example], series: &CheckpointSeries, triples: &[Triple], lr: f64) -> Result<Vec<TaylorRecord>> {
    triples
        .par_iter()
        .map(|t| {
            let state = &series.checkpoints[t.checkpoint].state;
            taylor_check(state, &data[t.z], &data[t.z0], lr)
        })
        .collect()
}

/// Median of a non-empty slice; the mean of the middle pair for even length.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() || values.iter().any(|v| v.is_nan()) {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let m = v.len() / 2;
    Some(if v.len() % 2 == 1 { v[m] } else { (v[m - 1] + v[m]) / 2.0 })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RetrainConfig {
    pub steps: usize,
    pub lr: f64,
}

impl Default for RetrainConfig {
    fn default() -> Self {
        Self { steps: 5, lr: 1e-3 }
    }
}

/// Outcome of fine-tuning the final checkpoint on one training set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionResult {
    pub name: String,
    pub size: usize,
    /// Mean RelInf of the condition's examples on their paired evals at the
    /// final checkpoint.
    pub predicted: f64,
    /// Total eval loss before minus after fine-tuning.
    pub realized: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrainReport {
    pub run_id: String,
    pub step: u64,
    pub k_top: usize,
    pub config: RetrainConfig,
    pub eval_loss_before: f64,
    pub conditions: Vec<ConditionResult>,
    pub self_training_largest: bool,
    /// Whether ranking conditions by `predicted` gives the same order as
    /// ranking them by `realized`.
    pub ordering_matches: bool,
}

fn total_loss(state: &ModelState, data: &[Example]) -> Result<f64> {
    let losses: Vec<f64> = data.par_iter().map(|z| completion_loss(state, z)).collect::<Result<_>>()?;
    Ok(losses.iter().sum())
}

/// Full-batch SGD on `train` from `state`; the state is cloned privately.
fn fine_tune(state: &ModelState, train: &[Example], cfg: RetrainConfig) -> Result<ModelState> {
    let batch: Vec<&Example> = train.iter().collect();
    let mut cur = state.clone();
    for _ in 0..cfg.steps {
        let div = numeric_to_diverged(cur.step);
        let (_, grad) = batch_gradient(&cur, &batch, GradScope::Adapters).map_err(&div)?;
        cur = apply_update(&cur, &grad, cfg.lr).map_err(&div)?;
    }
    Ok(cur)
}

fn rank_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    idx
}

/// Fine-tunes the last checkpoint of `series` on the evals themselves, on
/// all probes, and on the `k_top` probes with the largest paired RelInf,
/// then compares realized eval-loss reductions with predicted scores.
pub fn mini_retrain_check(
    sets: &PairedSets,
    series: &CheckpointSeries,
    k_top: usize,
    cfg: RetrainConfig,
    cache: &GradientCache,
) -> Result<RetrainReport> {
    if !(cfg.lr >= 0.0 && cfg.lr.is_finite()) {
        return Err(Error::Config(format!("learning rate {} must be non-negative", cfg.lr)));
    }
    if k_top == 0 || k_top > sets.len() {
        return Err(Error::Size(format!("k_top must be in 1..={}, got {k_top}", sets.len())));
    }
    let last = series
        .last()
        .ok_or_else(|| Error::Size("checkpoint series is empty".into()))?;
    let state = &last.state;
    let mut all = sets.probes.clone();
    all.extend(sets.evals.iter().cloned());
    let mut grads = cache.gradients(&series.run_id, state, &all)?;
    let eval_grads = grads.split_off(sets.len());
    let probe_grads = grads;

    let matrix = rel_inf_matrix(&probe_grads, &eval_grads)?;
    let diag: Vec<f64> = (0..sets.len()).map(|i| matrix[i][i]).collect();
    let mut top: Vec<usize> = rank_order(&diag)[..k_top].to_vec();
    top.sort_unstable();
    let top_mean = top.iter().map(|&i| diag[i]).sum::<f64>() / k_top as f64;

    let conditions: Vec<(String, Vec<Example>, f64)> = vec![
        ("evals".into(), sets.evals.clone(), s_in_from_grads(&eval_grads, &eval_grads)?),
        ("probes".into(), sets.probes.clone(), s_in_from_grads(&probe_grads, &eval_grads)?),
        (
            format!("top{k_top}"),
            top.iter().map(|&i| sets.probes[i].clone()).collect(),
            top_mean,
        ),
    ];
    let before = total_loss(state, &sets.evals)?;
    let results = conditions
        .into_par_iter()
        .map(|(name, train, predicted)| {
            let tuned = fine_tune(state, &train, cfg)?;
            Ok(ConditionResult {
                name,
                size: train.len(),
                predicted,
                realized: before - total_loss(&tuned, &sets.evals)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let realized: Vec<f64> = results.iter().map(|c| c.realized).collect();
    let predicted: Vec<f64> = results.iter().map(|c| c.predicted).collect();
    let self_training_largest = realized.iter().skip(1).all(|&r| realized[0] >= r);
    Ok(RetrainReport {
        run_id: series.run_id.clone(),
        step: last.step,
        k_top,
        config: cfg,
        eval_loss_before: before,
        conditions: results,
        self_training_largest,
        ordering_matches: rank_order(&predicted) == rank_order(&realized),
    })
}
