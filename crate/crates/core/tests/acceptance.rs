//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use gradtrace::influence::{
    diagonal_mean, off_diagonal_mean, rel_inf, trace, tracin_replay, GradientCache, MetricLabel, PairedSets,
};
use gradtrace::io;
use gradtrace::model::{completion_loss, example_gradient, loss_and_grad, GradScope, ModelConfig, ModelState};
use gradtrace::oracle::{median, mini_retrain_check, random_triples, taylor_batch, RetrainConfig};
use gradtrace::study::{design_study, gen_base_dataset, run_swift_study, StrategyKind, StudyConfig, TaskFamily};
use gradtrace::trainer::{train, CheckpointSeries, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

const BIN: &str = env!("CARGO_BIN_EXE_gradtrace");

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn err(e: impl std::fmt::Display) -> String {
    e.to_string()
}

fn gradtrace(args: &[&str], dir: &Path) -> Result<(), String> {
    let out = Command::new(BIN)
        .args(args)
        .env("SOURCE_DATE_EPOCH", "0")
        .current_dir(dir)
        .output()
        .map_err(err)?;
    check(
        out.status.success(),
        format!(
            "gradtrace {} exited with {:?}: {}",
            args.join(" "),
            out.status.code(),
            String::from_utf8_lossy(&out.stderr).lines().last().unwrap_or("")
        ),
    )
}

/// A small model and a short run with a few checkpoints.
fn small_series() -> (Vec<gradtrace::model::Example>, CheckpointSeries) {
    let cfg = ModelConfig {
        embed_dim: 16,
        layers: 2,
        heads: 2,
        context_len: 64,
        adapter_rank: 4,
        adapter_alpha: 8.0,
        ..ModelConfig::default()
    };
    let data = gen_base_dataset(&TaskFamily::ALL, 4, 11, cfg.context_len).expect("dataset");
    let tc = TrainConfig {
        epochs: 3,
        batch_size: 8,
        lr_peak: 1e-2,
        lr_final: 1e-4,
        warmup_steps: 2,
        checkpoint_stride: 4,
        seed: 3,
    };
    let s0 = ModelState::init(cfg, 5).expect("init");
    let series = train(&s0, &data, &tc, "small", |_| {}).expect("train");
    (data, series)
}

/// A narrow model at a generic adapter point: A at its init scale and B
/// drawn at the same scale instead of zero, with alpha equal to rank.
fn fidelity_state() -> Result<ModelState, String> {
    let cfg = ModelConfig {
        embed_dim: 16,
        context_len: 64,
        adapter_alpha: 8.0,
        ..ModelConfig::default()
    };
    let mut s = ModelState::init(cfg, 0).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let bound = 1.0 / (s.config.adapter_rank as f64).sqrt();
    for (name, t) in s.adapters.iter_mut() {
        if name.ends_with("lora_b") {
            for v in t.data_mut() {
                *v = rng.gen_range(-bound..bound);
            }
        }
    }
    Ok(s)
}

fn gradient_fidelity() -> Outcome {
    let t0 = Instant::now();
    let state = fidelity_state()?;
    let params = state.base_len() + state.adapter_len();
    check(params <= 50_000, format!("{params} parameters"))?;
    let data = gen_base_dataset(&TaskFamily::ALL, 1, 2, 64).map_err(err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = state.adapter_len();
    let coords = 128;
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for k in 0..coords {
        let z = &data[k % data.len()];
        let c = rng.gen_range(0..n);
        let g = loss_and_grad(&state, z, GradScope::Adapters, None).map_err(err)?.grad[c];
        let base = state.adapter_vector();
        let at = |delta: f64| -> Result<f64, String> {
            let mut s = state.clone();
            let mut v = base.clone();
            v[c] += delta;
            s.set_param_vector(GradScope::Adapters, &v).map_err(err)?;
            completion_loss(&s, z).map_err(err)
        };
        let fd = (at(h)? - at(-h)?) / (2.0 * h);
        let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    let elapsed = t0.elapsed();
    check(worst <= 1e-6, format!("max relative error {worst:.3e}"))?;
    check(elapsed < Duration::from_secs(120), format!("took {elapsed:?}"))?;
    Ok(format!(
        "{params} params, {coords} adapter coords, max rel err {worst:.2e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn self_influence() -> Outcome {
    let (data, series) = small_series();
    let mut worst: f64 = 0.0;
    let mut pairs = 0;
    for ck in &series.checkpoints {
        for z in data.iter().step_by(7).take(5) {
            if pairs == 20 {
                break;
            }
            let g = example_gradient(&ck.state, z, &series.run_id).map_err(err)?;
            worst = worst.max((rel_inf(&g, &g).map_err(err)? - 1.0).abs());
            pairs += 1;
        }
    }
    check(pairs == 20, format!("only {pairs} pairs"))?;
    check(worst <= 1e-12, format!("rel_inf(g,g) off by {worst:e}"))?;
    let evals: Vec<_> = data.iter().step_by(4).take(8).cloned().collect();
    let sets = PairedSets::new(evals.clone(), evals).map_err(err)?;
    let t = trace(&sets, &series, MetricLabel::new("Z", "Z"), &GradientCache::new(GradScope::Adapters)).map_err(err)?;
    let s_worst = t.records.iter().map(|r| (r.s_in - 1.0).abs()).fold(0.0, f64::max);
    check(s_worst <= 1e-12, format!("s_in off by {s_worst:e}"))?;
    Ok(format!(
        "{pairs} pairs within {worst:.1e}; s_in = 1 over {} checkpoints",
        t.records.len()
    ))
}

fn telescoping() -> Outcome {
    let cfg = ModelConfig::default();
    let data = gen_base_dataset(&TaskFamily::ALL, 1, 4, cfg.context_len).map_err(err)?;
    let state = ModelState::init(cfg, 8).map_err(err)?;
    let lrs: Vec<f64> = (0..20).map(|t| 2e-3 * (1.0 - t as f64 / 40.0)).collect();
    let rep = tracin_replay(&data[0], &data[3], &state, &lrs).map_err(err)?;
    let gap = (rep.measured() - rep.endpoint_delta()).abs();
    check(rep.measured_terms.len() == 20, "wrong step count")?;
    check(gap <= 1e-10, format!("sum vs endpoint gap {gap:e}"))?;
    Ok(format!("20 steps, measured {:.6}, gap {gap:.1e}", rep.measured()))
}

struct DeskRun {
    dir: tempfile::TempDir,
    elapsed: Duration,
}

impl DeskRun {
    fn run_dir(&self) -> std::path::PathBuf {
        self.dir.path().join("study/run")
    }
}

fn desk_run() -> Result<DeskRun, String> {
    let dir = tempfile::tempdir().map_err(err)?;
    let t0 = Instant::now();
    gradtrace(&["study", "--kind", "cot", "--seed", "7", "--out", "study"], dir.path())?;
    Ok(DeskRun {
        dir,
        elapsed: t0.elapsed(),
    })
}

fn taylor_validity(run: &DeskRun) -> Outcome {
    let (m, series) = io::load_run(&run.run_dir()).map_err(err)?;
    let data = io::load_dataset(&run.dir.path().join("study/data.jsonl"), m.model.context_len).map_err(err)?;
    let triples = random_triples(data.len(), series.checkpoints.len(), 50, 2024).map_err(err)?;
    let med = |lr: f64| -> Result<f64, String> {
        let recs = taylor_batch(&data, &series, &triples, lr).map_err(err)?;
        median(&recs.iter().map(|r| r.rel_error).collect::<Vec<_>>()).ok_or("no median".to_string())
    };
    let (m4, m5) = (med(1e-4)?, med(1e-5)?);
    check(m4 <= 0.05, format!("median rel error {m4:.4} at 1e-4"))?;
    check(m4 / m5 >= 3.0, format!("reduction factor {:.2}", m4 / m5))?;
    Ok(format!(
        "50 triples, median {:.2}% at 1e-4, {:.3}% at 1e-5, factor {:.1}",
        100.0 * m4,
        100.0 * m5,
        m4 / m5
    ))
}

fn protocol(run: &DeskRun) -> Outcome {
    let (m, _) = io::load_run(&run.run_dir()).map_err(err)?;
    let steps: Vec<u64> = m.checkpoints.iter().map(|c| c.step).collect();
    check(m.lr_schedule.len() == 300, format!("{}-step run", m.lr_schedule.len()))?;
    check(steps == vec![0, 50, 100, 150, 200, 250, 300], format!("checkpoints {steps:?}"))?;
    let rows = io::load_trace_csv(&run.dir.path().join("study/trace.csv")).map_err(err)?;
    let expected: BTreeSet<String> = [
        "CoT→In-task non-CoT",
        "non-CoT→In-task non-CoT",
        "CoT→Cross-task non-CoT",
        "non-CoT→Cross-task non-CoT",
    ]
    .map(String::from)
    .into();
    let mut seen: BTreeMap<u64, BTreeSet<String>> = BTreeMap::new();
    for (step, metric, value) in &rows {
        check(value.is_finite(), format!("{metric} at {step} is {value}"))?;
        check(seen.entry(*step).or_default().insert(metric.clone()), format!("duplicate {metric} at {step}"))?;
    }
    check(seen.keys().copied().collect::<Vec<_>>() == steps, "trace steps differ from checkpoints")?;
    check(seen.values().all(|s| *s == expected), "metric set differs")?;
    check(run.elapsed < Duration::from_secs(600), format!("took {:?}", run.elapsed))?;
    Ok(format!(
        "4 metrics x {} checkpoints, all finite, {:.1}s",
        steps.len(),
        run.elapsed.as_secs_f64()
    ))
}

fn aggregate_redundancy(run: &DeskRun) -> Outcome {
    let (m, series) = io::load_run(&run.run_dir()).map_err(err)?;
    let mut records = 0;
    for kind in [StrategyKind::Cot, StrategyKind::Clarify, StrategyKind::RespondEval] {
        let cfg = StudyConfig {
            seed: 7,
            context_len: m.model.context_len,
            ..StudyConfig::default()
        };
        let bundle = run_swift_study(kind, &cfg, &series, &GradientCache::new(GradScope::Adapters)).map_err(err)?;
        for t in &bundle.traces {
            check(t.aggregates_consistent(), format!("{} {}", kind.name(), t.label.pair_name()))?;
            records += t.records.len();
        }
    }
    // the same check from the files the CLI wrote
    let mut r = csv::Reader::from_path(run.dir.path().join("study/matrix.csv")).map_err(err)?;
    let mut mats: BTreeMap<(u64, String), Vec<(String, String, f64)>> = BTreeMap::new();
    for row in r.deserialize::<(u64, String, String, String, f64)>() {
        let (step, metric, p, e, v) = row.map_err(err)?;
        mats.entry((step, metric)).or_default().push((p, e, v));
    }
    let trace_rows = io::load_trace_csv(&run.dir.path().join("study/trace.csv")).map_err(err)?;
    let lookup: BTreeMap<(u64, String), f64> = trace_rows.into_iter().map(|(s, m, v)| ((s, m), v)).collect();
    for ((step, metric), cells) in &mats {
        let n = (cells.len() as f64).sqrt() as usize;
        check(n * n == cells.len(), "matrix is not square")?;
        let matrix: Vec<Vec<f64>> = cells.chunks(n).map(|row| row.iter().map(|c| c.2).collect()).collect();
        let (probe, target) = metric.split_once('→').ok_or("bad metric name")?;
        let s_in = lookup[&(*step, format!("{probe}→In-task {target}"))];
        let s_cross = lookup[&(*step, format!("{probe}→Cross-task {target}"))];
        check(diagonal_mean(&matrix).to_bits() == s_in.to_bits(), format!("s_in {metric} at {step}"))?;
        check(
            off_diagonal_mean(&matrix).map(f64::to_bits) == Some(s_cross.to_bits()),
            format!("s_cross {metric} at {step}"),
        )?;
        records += 1;
    }
    Ok(format!("{records} records bit-exact (3 study kinds in memory, CLI matrix/trace files)"))
}

fn determinism() -> Outcome {
    let a = tempfile::tempdir().map_err(err)?;
    let b = tempfile::tempdir().map_err(err)?;
    for d in [a.path(), b.path()] {
        gradtrace(&["gen-data", "--out", "data.jsonl", "--per-family", "6", "--seed", "3"], d)?;
        gradtrace(
            &["train", "--data", "data.jsonl", "--out", "run", "--epochs", "2", "--checkpoint-stride", "3"],
            d,
        )?;
        gradtrace(&["study", "--kind", "clarify", "--seed", "3", "--out", "study", "--run", "run"], d)?;
    }
    let mut files = Vec::new();
    let mut stack = vec![a.path().to_path_buf()];
    while let Some(p) = stack.pop() {
        for entry in std::fs::read_dir(&p).map_err(err)? {
            let path = entry.map_err(err)?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                files.push(path.strip_prefix(a.path()).map_err(err)?.to_path_buf());
            }
        }
    }
    files.sort();
    let mut kinds = BTreeSet::new();
    for f in &files {
        let x = std::fs::read(a.path().join(f)).map_err(err)?;
        let y = std::fs::read(b.path().join(f)).map_err(|e| format!("{}: {e}", f.display()))?;
        check(x == y, format!("{} differs", f.display()))?;
        if let Some(ext) = f.extension() {
            kinds.insert(ext.to_string_lossy().into_owned());
        }
    }
    for ext in ["jsonl", "gtck", "csv"] {
        check(kinds.contains(ext), format!("no .{ext} output compared"))?;
    }
    Ok(format!("{} files byte-identical across two invocations", files.len()))
}

fn oracle_ordering(run: &DeskRun) -> Outcome {
    let (m, series) = io::load_run(&run.run_dir()).map_err(err)?;
    let cache = GradientCache::new(GradScope::Adapters);
    let kinds = [StrategyKind::Cot, StrategyKind::Clarify, StrategyKind::RespondEval];
    let mut wins = 0;
    for trial in 0..10u64 {
        let kind = kinds[trial as usize % 3];
        let cfg = StudyConfig {
            seed: 100 + trial,
            context_len: m.model.context_len,
            ..StudyConfig::default()
        };
        let design = design_study(kind, &cfg).map_err(err)?;
        let report = mini_retrain_check(&design.pairings[0].1, &series, 4, RetrainConfig::default(), &cache).map_err(err)?;
        if report.self_training_largest {
            wins += 1;
        }
    }
    check(wins >= 9, format!("self-training largest in {wins}/10 trials"))?;
    Ok(format!("self-training largest in {wins}/10 trials"))
}

fn schedule_endpoints() -> Outcome {
    let cfg = TrainConfig::paper_scale();
    let n = 6400;
    let total = cfg.total_steps(n);
    let s = cfg.schedule(n);
    let (peak, last) = (s.lr_at(10), s.lr_at(total - 1));
    check((peak - 1e-5).abs() <= 1e-5 * 1e-12, format!("lr(10) = {peak:e}"))?;
    check((last - 1e-7).abs() <= 1e-7 * 1e-12, format!("lr({}) = {last:e}", total - 1))?;
    check(s.lr_at(0) == 0.0, "warmup does not start at zero")?;
    Ok(format!("{total} steps, lr(10) = {peak:e}, lr({}) = {last:e}", total - 1))
}

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, f: &mut dyn FnMut() -> Outcome| {
        let out = catch_unwind(AssertUnwindSafe(|| f())).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match out {
            Ok(detail) => println!("criterion {n} {name}: PASS ({detail})"),
            Err(why) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({why})");
            }
        }
    };
    report(1, "gradient fidelity", &mut gradient_fidelity);
    report(2, "self-influence identity", &mut self_influence);
    report(3, "telescoping TracIn", &mut telescoping);
    let desk = desk_run();
    let with_run = |f: fn(&DeskRun) -> Outcome| match &desk {
        Ok(run) => f(run),
        Err(e) => Err(format!("desk study run failed: {e}")),
    };
    report(4, "Taylor validity", &mut || with_run(taylor_validity));
    report(5, "protocol reproduction", &mut || with_run(protocol));
    report(6, "aggregate redundancy", &mut || with_run(aggregate_redundancy));
    report(7, "determinism", &mut determinism);
    report(8, "oracle ordering", &mut || with_run(oracle_ordering));
    report(9, "schedule endpoints", &mut schedule_endpoints);
    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
