//! Command-line entry points.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::error::{Error, Result};
use crate::influence::{trace, GradientCache, MetricLabel, PairedSets};
use crate::io;
use crate::model::{GradScope, ModelConfig, ModelState};
use crate::oracle::{median, mini_retrain_check, random_triples, taylor_batch, RetrainConfig};
use crate::study::{design_study, gen_base_dataset, run_swift_study, StrategyKind, StudyConfig, TaskFamily};
use crate::trainer::{pretrain_base, train, CheckpointSeries, StepLog, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "gradtrace", version, about = "Trace training-data influence across fine-tuning checkpoints")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the instruction-tuning corpus as JSONL.
    GenData(GenDataArgs),
    /// Fine-tune adapters and write checkpoints plus a manifest.
    Train(TrainArgs),
    /// Trace RelInf of a probe set on an eval set across a run.
    Trace(TraceArgs),
    /// Run a swift study for one data-creation strategy.
    Study(StudyArgs),
    /// Validate estimates against actual SGD steps and short retraining.
    Oracle(OracleArgs),
    /// Render a trace CSV as an SVG line chart.
    Report(ReportArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub per_family: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 256)]
    pub context_len: usize,
    /// Comma-separated family names; all families when omitted.
    #[arg(long, value_delimiter = ',')]
    pub families: Option<Vec<String>>,
}

#[derive(Debug, Args, Serialize)]
pub struct ModelArgs {
    #[arg(long, default_value_t = 64)]
    pub embed_dim: usize,
    #[arg(long, default_value_t = 2)]
    pub layers: usize,
    #[arg(long, default_value_t = 2)]
    pub heads: usize,
    #[arg(long, default_value_t = 256)]
    pub context_len: usize,
    #[arg(long, default_value_t = 8)]
    pub rank: usize,
    #[arg(long, default_value_t = 64.0)]
    pub alpha: f64,
    /// Seed for base and adapter initialization.
    #[arg(long, default_value_t = 0)]
    pub model_seed: u64,
}

impl ModelArgs {
    fn config(&self) -> ModelConfig {
        ModelConfig {
            embed_dim: self.embed_dim,
            layers: self.layers,
            heads: self.heads,
            context_len: self.context_len,
            adapter_rank: self.rank,
            adapter_alpha: self.alpha,
            ..ModelConfig::default()
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "run")]
    pub run_id: String,
    #[arg(long, default_value_t = 6)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 3e-3)]
    pub lr_peak: f64,
    #[arg(long, default_value_t = 3e-5)]
    pub lr_final: f64,
    #[arg(long, default_value_t = 10)]
    pub warmup_steps: u64,
    #[arg(long, default_value_t = 50)]
    pub checkpoint_stride: u64,
    /// Shuffle seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Epochs of full-parameter base training before adapter tuning.
    #[arg(long, default_value_t = 0)]
    pub pretrain_epochs: usize,
    #[command(flatten)]
    pub model: ModelArgs,
}

impl TrainArgs {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr_peak: self.lr_peak,
            lr_final: self.lr_final,
            warmup_steps: self.warmup_steps,
            checkpoint_stride: self.checkpoint_stride,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TraceArgs {
    /// Run directory or manifest path.
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub probes: PathBuf,
    #[arg(long)]
    pub evals: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Also write the full RelInf matrices here.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[arg(long, default_value = "probe")]
    pub probe_label: String,
    #[arg(long, default_value = "eval")]
    pub target_label: String,
    /// Include base parameters in the gradient.
    #[arg(long)]
    pub all_params: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct StudyArgs {
    /// cot, clarify or respond_eval.
    #[arg(long)]
    pub kind: String,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Existing run to trace; a default run is trained into `<out>/run` otherwise.
    #[arg(long)]
    pub run: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    /// Examples per family for the generated training corpus.
    #[arg(long, default_value_t = 50)]
    pub per_family: usize,
    #[arg(long)]
    pub all_params: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Dataset the Taylor triples are drawn from.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub triples: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Strategy kinds whose first pairing is retrained.
    #[arg(long, value_delimiter = ',', default_value = "cot,clarify,respond_eval")]
    pub kinds: Vec<String>,
    #[arg(long, default_value_t = 4)]
    pub k_top: usize,
    #[arg(long, default_value_t = 5)]
    pub retrain_steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub retrain_lr: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    pub trace: PathBuf,
    /// Defaults to the trace path with an `.svg` extension.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub title: Option<String>,
}

fn print_config(command: &str, args: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string(&json!({ "command": command, "args": args }))?);
    Ok(())
}

fn log_step(l: &StepLog) {
    eprintln!("{l}");
}

fn scope(all: bool) -> GradScope {
    if all {
        GradScope::All
    } else {
        GradScope::Adapters
    }
}

fn families(names: &Option<Vec<String>>) -> Result<Vec<TaskFamily>> {
    match names {
        None => Ok(TaskFamily::ALL.to_vec()),
        Some(list) => list
            .iter()
            .map(|n| TaskFamily::from_name(n).ok_or_else(|| Error::Config(format!("unknown task family {n:?}"))))
            .collect(),
    }
}

fn gen_data(a: &GenDataArgs) -> Result<()> {
    let data = gen_base_dataset(&families(&a.families)?, a.per_family, a.seed, a.context_len)?;
    io::save_dataset(&a.out, &data)?;
    eprintln!("wrote {} examples to {}", data.len(), a.out.display());
    Ok(())
}

fn train_run(a: &TrainArgs) -> Result<()> {
    let cfg = a.model.config();
    let data = io::load_dataset(&a.data, cfg.context_len)?;
    let tc = a.train_config();
    let mut state = ModelState::init(cfg, a.model.model_seed)?;
    if a.pretrain_epochs > 0 {
        let pc = TrainConfig {
            epochs: a.pretrain_epochs,
            ..tc.clone()
        };
        state = pretrain_base(&state, &data, &pc, |l| eprintln!("pretrain {l}"))?;
    }
    let series = train(&state, &data, &tc, &a.run_id, log_step)?;
    let m = io::save_run(&a.out, &series, &tc, data.len())?;
    eprintln!("wrote {} checkpoints to {}", m.checkpoints.len(), a.out.display());
    Ok(())
}

fn trace_run(a: &TraceArgs) -> Result<()> {
    let (manifest, series) = io::load_run(&a.run)?;
    let ctx = manifest.model.context_len;
    let sets = PairedSets::new(io::load_dataset(&a.probes, ctx)?, io::load_dataset(&a.evals, ctx)?)?;
    let cache = GradientCache::new(scope(a.all_params));
    let label = MetricLabel::new(a.probe_label.clone(), a.target_label.clone());
    let t = trace(&sets, &series, label, &cache)?;
    io::save_trace_csv(&a.out, &crate::influence::trace_rows(std::slice::from_ref(&t)))?;
    if let Some(p) = &a.matrix {
        io::write_atomic(p, io::matrix_csv(&[(&t, &sets)])?.as_bytes())?;
    }
    Ok(())
}

/// The default study run: full corpus, desk training defaults, seeds tied
/// to the study seed.
pub fn default_run(seed: u64, per_family: usize, out: &Path) -> Result<CheckpointSeries> {
    let cfg = ModelConfig::default();
    let data = gen_base_dataset(&TaskFamily::ALL, per_family, seed, cfg.context_len)?;
    io::save_dataset(&out.join("data.jsonl"), &data)?;
    let tc = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    let state = ModelState::init(cfg, seed)?;
    let series = train(&state, &data, &tc, &format!("study-{seed}"), log_step)?;
    io::save_run(&out.join("run"), &series, &tc, data.len())?;
    Ok(series)
}

fn study(a: &StudyArgs) -> Result<()> {
    let kind: StrategyKind = a.kind.parse()?;
    let series = match &a.run {
        Some(run) => io::load_run(run)?.1,
        None => default_run(a.seed, a.per_family, &a.out)?,
    };
    let first = &series.checkpoints[0].state;
    let cfg = StudyConfig {
        pairs: a.pairs,
        seed: a.seed,
        scope: scope(a.all_params),
        context_len: first.config.context_len,
        ..StudyConfig::default()
    };
    let cache = GradientCache::new(cfg.scope);
    let bundle = run_swift_study(kind, &cfg, &series, &cache)?;
    io::save_trace_csv(&a.out.join("trace.csv"), &bundle.rows())?;
    let pairs: Vec<_> = bundle
        .traces
        .iter()
        .zip(&bundle.design.pairings)
        .map(|(t, (_, s))| (t, s))
        .collect();
    io::write_atomic(&a.out.join("matrix.csv"), io::matrix_csv(&pairs)?.as_bytes())?;
    for (name, set) in &bundle.design.sets {
        io::save_dataset(&a.out.join("sets").join(format!("{name}.jsonl")), set)?;
    }
    eprintln!(
        "traced {} metrics over {} checkpoints into {}",
        bundle.design.metric_names().len(),
        series.checkpoints.len(),
        a.out.display()
    );
    Ok(())
}

fn oracle(a: &OracleArgs) -> Result<()> {
    let (manifest, series) = io::load_run(&a.run)?;
    let data = io::load_dataset(&a.data, manifest.model.context_len)?;
    let triples = random_triples(data.len(), series.checkpoints.len(), a.triples, a.seed)?;
    let mut taylor = Vec::new();
    for lr in [1e-4, 1e-5] {
        let recs = taylor_batch(&data, &series, &triples, lr)?;
        let errs: Vec<f64> = recs.iter().map(|r| r.rel_error).collect();
        taylor.push(json!({ "lr": lr, "median_rel_error": median(&errs), "records": recs }));
    }
    let cache = GradientCache::new(GradScope::Adapters);
    let rc = RetrainConfig {
        steps: a.retrain_steps,
        lr: a.retrain_lr,
    };
    let mut retrain = Vec::new();
    for k in &a.kinds {
        let kind: StrategyKind = k.parse()?;
        let cfg = StudyConfig {
            seed: a.seed,
            context_len: manifest.model.context_len,
            ..StudyConfig::default()
        };
        let design = design_study(kind, &cfg)?;
        let (label, sets) = &design.pairings[0];
        let report = mini_retrain_check(sets, &series, a.k_top.min(sets.len()), rc, &cache)?;
        retrain.push(json!({ "kind": kind, "pairing": label.pair_name(), "report": report }));
    }
    let mut text = serde_json::to_string_pretty(&json!({ "run_id": series.run_id, "taylor": taylor, "retrain": retrain }))?;
    text.push('\n');
    io::write_atomic(&a.out, text.as_bytes())
}

fn report(a: &ReportArgs) -> Result<()> {
    let rows = io::load_trace_csv(&a.trace)?;
    let out = a.out.clone().unwrap_or_else(|| a.trace.with_extension("svg"));
    let title = a
        .title
        .clone()
        .unwrap_or_else(|| a.trace.file_stem().map_or("trace".into(), |s| s.to_string_lossy().into_owned()));
    io::write_atomic(&out, io::render_svg(&rows, &title)?.as_bytes())
}

fn configure_threads() -> Result<()> {
    if let Ok(v) = std::env::var("GRADTRACE_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("GRADTRACE_THREADS must be a positive integer, got {v:?}")))?;
        // a second call in the same process keeps the first pool
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    Ok(())
}

pub fn execute(cli: &Cli) -> Result<()> {
    configure_threads()?;
    match &cli.command {
        Command::GenData(a) => print_config("gen-data", a).and_then(|_| gen_data(a)),
        Command::Train(a) => print_config("train", a).and_then(|_| train_run(a)),
        Command::Trace(a) => print_config("trace", a).and_then(|_| trace_run(a)),
        Command::Study(a) => print_config("study", a).and_then(|_| study(a)),
        Command::Oracle(a) => print_config("oracle", a).and_then(|_| oracle(a)),
        Command::Report(a) => print_config("report", a).and_then(|_| report(a)),
    }
}

/// Parses `argv` and runs the command, returning the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match execute(&cli) {
        Ok(()) => EXIT_OK,
        Err(e @ Error::Config(_)) => {
            eprintln!("error: {e}");
            EXIT_USAGE
        }
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_RUNTIME
        }
    }
}
