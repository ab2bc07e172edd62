use std::path::Path;
use std::process::Command;

use gradtrace::influence::{trace, tracin_replay, GradientCache, MetricLabel, PairedSets};
use gradtrace::io;
use gradtrace::model::{GradScope, ModelConfig, ModelState};
use gradtrace::study::{design_study, gen_base_dataset, StrategyKind, StudyConfig, TaskFamily};
use gradtrace::trainer::{train, train_until, CheckpointSeries, TrainConfig};
use gradtrace::Error;

const BIN: &str = env!("CARGO_BIN_EXE_gradtrace");

fn small_config() -> ModelConfig {
    ModelConfig {
        embed_dim: 16,
        ..ModelConfig::default()
    }
}

fn small_train() -> TrainConfig {
    TrainConfig {
        epochs: 3,
        warmup_steps: 2,
        checkpoint_stride: 2,
        ..TrainConfig::default()
    }
}

fn cli(dir: &Path, args: &[&str]) -> std::process::Output {
    Command::new(BIN)
        .args(args)
        .current_dir(dir)
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .expect("binary runs")
}

#[test]
fn saved_run_resumes_bit_exactly() {
    let data = gen_base_dataset(&TaskFamily::ALL, 2, 1, 256).unwrap();
    let tc = small_train();
    let s0 = ModelState::init(small_config(), 3).unwrap();
    let full = train(&s0, &data, &tc, "r", |_| {}).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let partial = train_until(&s0, &data, &tc, "r", 2, |_| {}).unwrap();
    io::save_run(dir.path(), &partial, &tc, data.len()).unwrap();
    let (_, loaded) = io::load_run(dir.path()).unwrap();
    let mid = loaded.last().unwrap().state.clone();
    let resumed = train_until(&mid, &data, &tc, "r", tc.total_steps(data.len()), |_| {}).unwrap();

    let a = full.last().unwrap();
    let b = resumed.last().unwrap();
    assert_eq!(a.step, b.step);
    assert_eq!(a.state.fingerprint(), b.state.fingerprint());
}

#[test]
fn desk_trace_has_one_finite_record_per_checkpoint() {
    let data = gen_base_dataset(&TaskFamily::ALL, 2, 1, 256).unwrap();
    let tc = TrainConfig {
        epochs: 5,
        ..small_train()
    };
    let series = train(&ModelState::init(small_config(), 3).unwrap(), &data, &tc, "r", |_| {}).unwrap();
    assert_eq!(series.checkpoints.len(), 6);
    let design = design_study(StrategyKind::Cot, &StudyConfig::default()).unwrap();
    let (label, sets) = &design.pairings[0];
    assert_eq!(sets.len(), 8);
    let cache = GradientCache::new(GradScope::Adapters);
    let t = trace(sets, &series, label.clone(), &cache).unwrap();
    assert_eq!(t.records.len(), 6);
    assert_eq!(cache.computed(), 6 * 16);
    for r in &t.records {
        assert!(r.s_in.is_finite() && r.s_cross.unwrap().is_finite());
        assert!(r.matrix.iter().flatten().all(|v| v.is_finite()));
    }
    let rows = gradtrace::influence::trace_rows(std::slice::from_ref(&t));
    let text = io::trace_csv(&rows).unwrap();
    assert_eq!(text.lines().count(), 1 + 12);
}

#[test]
fn single_checkpoint_series_gives_single_record() {
    let s = ModelState::init(small_config(), 3).unwrap();
    let data = gen_base_dataset(&TaskFamily::ALL, 1, 1, 256).unwrap();
    let series = train(&s, &data, &small_train(), "r", |_| {}).unwrap();
    let step0 = CheckpointSeries::single("r", (*series.checkpoints[1].state).clone());
    let sets = PairedSets::new(data[..3].to_vec(), data[3..6].to_vec()).unwrap();
    let t = trace(&sets, &step0, MetricLabel::new("a", "b"), &GradientCache::new(GradScope::Adapters)).unwrap();
    assert_eq!(t.records.len(), 1);
}

#[test]
fn tracin_approximation_tracks_measured_sum() {
    let data = gen_base_dataset(&TaskFamily::ALL, 1, 5, 256).unwrap();
    let s = ModelState::init(ModelConfig::default(), 2).unwrap();
    let warm = train(&s, &data, &TrainConfig { epochs: 3, warmup_steps: 1, ..TrainConfig::default() }, "w", |_| {})
        .unwrap();
    let state = &warm.last().unwrap().state;
    let lrs = vec![1e-4; 20];
    let rep = tracin_replay(&data[1], &data[1], state, &lrs).unwrap();
    let rel = (rep.approx() - rep.measured()).abs() / rep.measured().abs();
    assert!(rel <= 0.10, "approx {} measured {}", rep.approx(), rep.measured());
    assert!((rep.measured() - rep.endpoint_delta()).abs() <= 1e-10);
}

#[test]
fn zero_epoch_train_writes_only_step_zero() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cli(dir.path(), &["gen-data", "--out", "d.jsonl", "--per-family", "2"]).status.success());
    let out = cli(dir.path(), &["train", "--data", "d.jsonl", "--out", "run", "--epochs", "0"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let first = String::from_utf8(out.stdout).unwrap();
    let line = first.lines().next().unwrap();
    let cfg: serde_json::Value = serde_json::from_str(line).unwrap();
    assert_eq!(cfg["command"], "train");
    assert_eq!(cfg["args"]["epochs"], 0);
    let (m, series) = io::load_run(&dir.path().join("run")).unwrap();
    assert_eq!(m.checkpoints.len(), 1);
    assert_eq!(series.steps(), vec![0]);
}

#[test]
fn cli_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cli(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["study", "--kind", "cot", "--out", "x", "--unknown"]).status.code(), Some(1));
    assert_eq!(cli(dir.path(), &["report", "missing.csv"]).status.code(), Some(2));
    std::fs::write(dir.path().join("bad.gtck"), b"GTCK").unwrap();
    let out = cli(dir.path(), &["trace", "--run", "nowhere", "--probes", "p", "--evals", "e", "--out", "t.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn study_trace_renders_four_labeled_lines() {
    let dir = tempfile::tempdir().unwrap();
    assert!(cli(dir.path(), &["gen-data", "--out", "d.jsonl", "--per-family", "3"]).status.success());
    assert!(cli(
        dir.path(),
        &["train", "--data", "d.jsonl", "--out", "run", "--epochs", "1", "--warmup-steps", "1", "--checkpoint-stride", "1"]
    )
    .status
    .success());
    let out = cli(dir.path(), &["study", "--kind", "cot", "--out", "s", "--run", "run"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(cli(dir.path(), &["report", "s/trace.csv", "--out", "fig.svg"]).status.success());
    let svg = std::fs::read_to_string(dir.path().join("fig.svg")).unwrap();
    assert_eq!(svg.matches("<polyline").count(), 4);
    for name in ["CoT→In-task non-CoT", "non-CoT→Cross-task non-CoT"] {
        assert!(svg.contains(name));
    }
}

#[test]
fn truncated_checkpoint_never_loads() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("c.gtck");
    let s = ModelState::init(small_config(), 1).unwrap();
    io::save_checkpoint(&p, &s).unwrap();
    let bytes = std::fs::read(&p).unwrap();
    std::fs::write(&p, &bytes[..bytes.len() - 100]).unwrap();
    assert!(matches!(io::load_checkpoint(&p), Err(Error::Corruption { .. })));
    let leftovers: Vec<_> = std::fs::read_dir(dir.path()).unwrap().collect();
    assert_eq!(leftovers.len(), 1);
}
