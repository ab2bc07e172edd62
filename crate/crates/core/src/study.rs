//! Synthetic task families, strategy transforms, and the three swift-study
//! protocols built on them.
//!
//! Every task query has the shape `"<instruction>: <input>."` optionally
//! followed by the format directive `" Answer in []."`. A well-formed
//! response wraps the rule's output in brackets. Negative examples drop the
//! directive from the query and answer without brackets.

use std::hash::{Hash, Hasher};

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{trace, GradientCache, InfluenceTrace, MetricLabel, PairedSets};
use crate::model::{Example, GradScope};
use crate::trainer::CheckpointSeries;

pub const FORMAT_DIRECTIVE: &str = " Answer in [].";
pub const COT_DIRECTIVE: &str = " Give the reason first, then the answer.";
pub const CLARIFY_PREFIX: &str = "[Input]: ";
pub const CLARIFY_SUFFIX: &str = " Rephrase the [Input] so its meaning is clear.";
pub const EVAL_PREFIX: &str = "Judge whether the [Output] meets the [Input]. [Input]: ";
pub const VERDICT_MEETS: &str = "MEETS";
pub const VERDICT_FAILS: &str = "DOES NOT MEET";

const MAX_RETRIES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskFamily {
    Copy,
    Reverse,
    SortDigits,
    ModularSum,
    SubstringExtract,
    PatternClassify,
    Uppercase,
    CountChar,
}

impl TaskFamily {
    pub const ALL: [TaskFamily; 8] = [
        TaskFamily::Copy,
        TaskFamily::Reverse,
        TaskFamily::SortDigits,
        TaskFamily::ModularSum,
        TaskFamily::SubstringExtract,
        TaskFamily::PatternClassify,
        TaskFamily::Uppercase,
        TaskFamily::CountChar,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskFamily::Copy => "copy",
            TaskFamily::Reverse => "reverse",
            TaskFamily::SortDigits => "sort-digits",
            TaskFamily::ModularSum => "modular-sum",
            TaskFamily::SubstringExtract => "substring-extract",
            TaskFamily::PatternClassify => "pattern-classify",
            TaskFamily::Uppercase => "uppercase",
            TaskFamily::CountChar => "count-char",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == name)
    }

    fn instruction(self) -> &'static str {
        match self {
            TaskFamily::Copy => "copy",
            TaskFamily::Reverse => "reverse",
            TaskFamily::SortDigits => "sort digits",
            TaskFamily::ModularSum => "sum mod 10",
            TaskFamily::SubstringExtract => "extract",
            TaskFamily::PatternClassify => "classify",
            TaskFamily::Uppercase => "uppercase",
            TaskFamily::CountChar => "count",
        }
    }

    /// What a fully specified query asks for, spelled out.
    pub fn requirement(self) -> &'static str {
        match self {
            TaskFamily::Copy => "repeat the letters unchanged",
            TaskFamily::Reverse => "write the letters last to first",
            TaskFamily::SortDigits => "digits in ascending order",
            TaskFamily::ModularSum => "last digit of the sum",
            TaskFamily::SubstringExtract => "letters from index i up to j",
            TaskFamily::PatternClassify => "alpha, digit or mixed",
            TaskFamily::Uppercase => "capitalize every letter",
            TaskFamily::CountChar => "occurrences of the last letter",
        }
    }

    /// Samples an input with at most `max_len` payload characters.
    fn sample_input(self, rng: &mut ChaCha8Rng, max_len: usize) -> String {
        let max_len = max_len.max(3);
        let letters = |rng: &mut ChaCha8Rng, n: usize| -> String {
            (0..n).map(|_| (b'a' + rng.gen_range(0..26)) as char).collect()
        };
        let digits = |rng: &mut ChaCha8Rng, n: usize| -> String {
            (0..n).map(|_| (b'0' + rng.gen_range(0..10)) as char).collect()
        };
        let len = |rng: &mut ChaCha8Rng, lo: usize, hi: usize| rng.gen_range(lo.min(max_len)..=hi.min(max_len));
        match self {
            TaskFamily::Copy | TaskFamily::Reverse | TaskFamily::Uppercase => {
                let n = len(rng, 3, 8);
                letters(rng, n)
            }
            TaskFamily::SortDigits => {
                let n = len(rng, 3, 8);
                digits(rng, n)
            }
            TaskFamily::ModularSum => {
                let n = len(rng, 3, 5);
                let nums: Vec<String> = (0..n).map(|_| rng.gen_range(0..10).to_string()).collect();
                nums.join(" ")
            }
            TaskFamily::SubstringExtract => {
                let n = len(rng, 4, 9);
                let s = letters(rng, n);
                let i = rng.gen_range(0..n - 1);
                let j = rng.gen_range(i + 1..=n);
                format!("{s} {i} {j}")
            }
            TaskFamily::PatternClassify => {
                let n = len(rng, 3, 7);
                match rng.gen_range(0..3) {
                    0 => letters(rng, n),
                    1 => digits(rng, n),
                    _ => {
                        let mut s: Vec<char> = letters(rng, n).chars().collect();
                        let k = rng.gen_range(0..n);
                        s[k] = (b'0' + rng.gen_range(0..10)) as char;
                        let k2 = (k + 1) % n;
                        s[k2] = (b'a' + rng.gen_range(0..26)) as char;
                        s.into_iter().collect()
                    }
                }
            }
            TaskFamily::CountChar => {
                let n = len(rng, 4, 8);
                let s: String = (0..n).map(|_| (b'a' + rng.gen_range(0..4)) as char).collect();
                let c = (b'a' + rng.gen_range(0..4)) as char;
                format!("{s} {c}")
            }
        }
    }

    /// The task rule: correct output for `input`.
    pub fn solve(self, input: &str) -> Result<String> {
        let malformed = || Error::Task(format!("malformed {} input {input:?}", self.name()));
        Ok(match self {
            TaskFamily::Copy => input.to_string(),
            TaskFamily::Reverse => input.chars().rev().collect(),
            TaskFamily::Uppercase => input.to_ascii_uppercase(),
            TaskFamily::SortDigits => {
                let mut d: Vec<char> = input.chars().collect();
                d.sort_unstable();
                d.into_iter().collect()
            }
            TaskFamily::ModularSum => {
                let mut total = 0u64;
                for t in input.split(' ') {
                    total += t.parse::<u64>().map_err(|_| malformed())?;
                }
                (total % 10).to_string()
            }
            TaskFamily::SubstringExtract => {
                let (s, i, j) = split_extract(input).ok_or_else(malformed)?;
                s[i..j].to_string()
            }
            TaskFamily::PatternClassify => {
                if input.chars().all(|c| c.is_ascii_alphabetic()) {
                    "alpha".into()
                } else if input.chars().all(|c| c.is_ascii_digit()) {
                    "digit".into()
                } else {
                    "mixed".into()
                }
            }
            TaskFamily::CountChar => {
                let (s, c) = input.split_once(' ').ok_or_else(malformed)?;
                let c = c.chars().next().ok_or_else(malformed)?;
                s.chars().filter(|&x| x == c).count().to_string()
            }
        })
    }

    /// Step-by-step rendering of how the rule reaches its output.
    pub fn rationale(self, input: &str) -> Result<String> {
        let out = self.solve(input)?;
        Ok(match self {
            TaskFamily::Copy => format!("Read {input} one letter at a time and write each back."),
            TaskFamily::Reverse => {
                let steps: Vec<String> = input.chars().rev().map(String::from).collect();
                format!("Take letters from the end: {}.", steps.join(" "))
            }
            TaskFamily::Uppercase => {
                let steps: Vec<String> = input
                    .chars()
                    .map(|c| format!("{c}>{}", c.to_ascii_uppercase()))
                    .collect();
                format!("Map each letter: {}.", steps.join(" "))
            }
            TaskFamily::SortDigits => {
                // selection order: each pick is the smallest remaining digit
                let picks: Vec<String> = out.chars().map(String::from).collect();
                format!("Pick the smallest left each time: {}.", picks.join(" "))
            }
            TaskFamily::ModularSum => {
                let mut running = 0u64;
                let mut parts = Vec::new();
                for t in input.split(' ') {
                    let v: u64 = t.parse().map_err(|_| Error::Task(format!("bad number {t:?}")))?;
                    running += v;
                    parts.push(running.to_string());
                }
                format!("Running sums {}; last digit {out}.", parts.join(" "))
            }
            TaskFamily::SubstringExtract => {
                let (s, i, j) = split_extract(input)
                    .ok_or_else(|| Error::Task(format!("malformed input {input:?}")))?;
                format!("From {s} start at {i}, stop before {j}: {out}.")
            }
            TaskFamily::PatternClassify => {
                let a = input.chars().filter(|c| c.is_ascii_alphabetic()).count();
                let d = input.chars().filter(|c| c.is_ascii_digit()).count();
                format!("{a} letters and {d} digits, so {out}.")
            }
            TaskFamily::CountChar => {
                let (s, c) = input
                    .split_once(' ')
                    .ok_or_else(|| Error::Task(format!("malformed input {input:?}")))?;
                let c = c.chars().next().unwrap_or(' ');
                let pos: Vec<String> = s
                    .chars()
                    .enumerate()
                    .filter(|&(_, x)| x == c)
                    .map(|(i, _)| i.to_string())
                    .collect();
                if pos.is_empty() {
                    format!("{c} never occurs, so 0.")
                } else {
                    format!("{c} at positions {}, so {out}.", pos.join(" "))
                }
            }
        })
    }

    fn bare_query(self, input: &str) -> String {
        format!("{}: {input}.", self.instruction())
    }

    /// Extracts the task input from any query built on this family's shape.
    pub fn parse_input(self, query: &str) -> Result<String> {
        let prefix = format!("{}: ", self.instruction());
        query
            .strip_prefix(&prefix)
            .and_then(|rest| rest.split_once('.'))
            .map(|(input, _)| input.to_string())
            .ok_or_else(|| Error::Task(format!("query {query:?} is not a {} query", self.name())))
    }
}

fn split_extract(input: &str) -> Option<(&str, usize, usize)> {
    let mut it = input.split(' ');
    let s = it.next()?;
    let i: usize = it.next()?.parse().ok()?;
    let j: usize = it.next()?.parse().ok()?;
    (i < j && j <= s.len()).then_some((s, i, j))
}

/// How a task query is phrased.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Form {
    /// Instruction, input and format directive; bracketed answer.
    Plain,
    /// Directive dropped; unbracketed answer.
    Negative,
    /// Negative query with the requirements spelled out; bracketed answer.
    Positive,
}

fn bracket(s: &str) -> String {
    format!("[{s}]")
}

/// Restates an under-specified query with its requirements appended.
pub fn expanded_restatement(family: TaskFamily, query: &str) -> String {
    format!("{query} Requirements: {};{FORMAT_DIRECTIVE}", family.requirement())
}

/// Query and response text for `input` in the given form.
pub fn render(family: TaskFamily, input: &str, form: Form) -> Result<(String, String)> {
    let out = family.solve(input)?;
    let bare = family.bare_query(input);
    Ok(match form {
        Form::Plain => (format!("{bare}{FORMAT_DIRECTIVE}"), bracket(&out)),
        Form::Negative => (bare, out),
        Form::Positive => (expanded_restatement(family, &bare), bracket(&out)),
    })
}

fn form_of(query: &str) -> Form {
    if query.contains(" Requirements: ") {
        Form::Positive
    } else if query.ends_with(FORMAT_DIRECTIVE) {
        Form::Plain
    } else {
        Form::Negative
    }
}

fn family_of(z: &Example) -> Result<TaskFamily> {
    TaskFamily::from_name(&z.task).ok_or_else(|| Error::Task(format!("unknown task {:?}", z.task)))
}

fn derived_rng(seed: u64, parts: &[&dyn HashPart]) -> ChaCha8Rng {
    let mut h = FnvHasher::default();
    seed.hash(&mut h);
    for p in parts {
        p.feed(&mut h);
    }
    ChaCha8Rng::seed_from_u64(h.finish())
}

trait HashPart {
    fn feed(&self, h: &mut FnvHasher);
}

impl HashPart for &str {
    fn feed(&self, h: &mut FnvHasher) {
        self.hash(h);
    }
}

impl HashPart for u64 {
    fn feed(&self, h: &mut FnvHasher) {
        self.hash(h);
    }
}

/// Builds one example, shrinking the input on context overflow.
fn sample_example(
    family: TaskFamily,
    form: Form,
    rng: &mut ChaCha8Rng,
    id: String,
    context_len: usize,
    avoid: Option<&str>,
) -> Result<Example> {
    let mut max_len = 16;
    let mut last_err = None;
    for _ in 0..MAX_RETRIES {
        let input = family.sample_input(rng, max_len);
        if avoid == Some(input.as_str()) {
            continue;
        }
        let (q, r) = render(family, &input, form)?;
        match Example::from_text(id.clone(), family.name(), &q, &r, context_len) {
            Ok(z) => return Ok(z),
            Err(e @ Error::Length(_)) => {
                last_err = Some(e);
                max_len = (max_len / 2).max(3);
            }
            Err(e) => return Err(e),
        }
    }
    Err(last_err.unwrap_or_else(|| Error::Task(format!("could not sample a fresh {} example", family.name()))))
}

/// The instruction-tuning corpus: `per_family` plain examples per family,
/// ids `base/<family>/<k>`.
pub fn gen_base_dataset(
    families: &[TaskFamily],
    per_family: usize,
    seed: u64,
    context_len: usize,
) -> Result<Vec<Example>> {
    if per_family == 0 || families.is_empty() {
        return Err(Error::Size("need at least one family and one example per family".into()));
    }
    let mut out = Vec::with_capacity(families.len() * per_family);
    for &f in families {
        let mut rng = derived_rng(seed, &[&"base", &f.name()]);
        for k in 0..per_family {
            let id = format!("base/{}/{k:04}", f.name());
            out.push(sample_example(f, Form::Plain, &mut rng, id, context_len, None)?);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    Cot,
    Clarify,
    RespondEval,
}

impl StrategyKind {
    pub fn name(self) -> &'static str {
        match self {
            StrategyKind::Cot => "cot",
            StrategyKind::Clarify => "clarify",
            StrategyKind::RespondEval => "respond_eval",
        }
    }
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cot" => Ok(StrategyKind::Cot),
            "clarify" => Ok(StrategyKind::Clarify),
            "respond_eval" | "respond-eval" => Ok(StrategyKind::RespondEval),
            other => Err(Error::Config(format!("unknown strategy kind {other:?}"))),
        }
    }
}

/// Whether `z`'s response satisfies its task rule, including the bracket format.
pub fn meets_requirements(z: &Example) -> Result<bool> {
    let family = family_of(z)?;
    let input = family.parse_input(&z.query_text()?)?;
    Ok(z.response_text()? == bracket(&family.solve(&input)?))
}

/// Applies a data-creation strategy to `z`. The seed is accepted for
/// interface stability; all current transforms are fully determined by `z`.
pub fn make_variant(z: &Example, kind: StrategyKind, _seed: u64, context_len: usize) -> Result<Example> {
    let family = family_of(z)?;
    let q = z.query_text()?;
    let r = z.response_text()?;
    let input = family.parse_input(&q)?;
    let (query, response) = match kind {
        StrategyKind::Cot => (
            format!("{q}{COT_DIRECTIVE}"),
            format!("{} So the answer is {r}", family.rationale(&input)?),
        ),
        StrategyKind::Clarify => (
            format!("{CLARIFY_PREFIX}{q}{CLARIFY_SUFFIX}"),
            expanded_restatement(family, &q),
        ),
        StrategyKind::RespondEval => {
            let verdict = if meets_requirements(z)? { VERDICT_MEETS } else { VERDICT_FAILS };
            (
                format!("{EVAL_PREFIX}{q} [Output]: {r}"),
                format!(
                    "Rule: {}, in []. Expected {}. Thus: {verdict}",
                    family.requirement(),
                    bracket(&family.solve(&input)?)
                ),
            )
        }
    };
    Example::from_text(format!("{}/{}", z.id, kind.name()), z.task.clone(), &query, &response, context_len)
}

/// A fresh example of the same family and form as `z` with a different input.
pub fn analog_of(z: &Example, seed: u64, context_len: usize) -> Result<Example> {
    let family = family_of(z)?;
    let q = z.query_text()?;
    let input = family.parse_input(&q)?;
    let mut rng = derived_rng(seed, &[&"analog", &z.id.as_str()]);
    sample_example(
        family,
        form_of(&q),
        &mut rng,
        format!("{}/analog", z.id),
        context_len,
        Some(&input),
    )
}

/// Pairs each evaluation example with a strategy variant of a same-task analog.
pub fn build_paired_sets(evals: &[Example], kind: StrategyKind, seed: u64, context_len: usize) -> Result<PairedSets> {
    let mut tasks: Vec<&str> = evals.iter().map(|z| z.task.as_str()).collect();
    tasks.sort_unstable();
    tasks.dedup();
    if tasks.len() < 2 {
        return Err(Error::Size(format!(
            "cross-task pairing needs at least 2 distinct tasks, got {}",
            tasks.len()
        )));
    }
    let probes = evals
        .iter()
        .map(|z| make_variant(&analog_of(z, seed, context_len)?, kind, seed, context_len))
        .collect::<Result<Vec<_>>>()?;
    PairedSets::new(probes, evals.to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StudyConfig {
    /// Probe/eval pairs per set.
    pub pairs: usize,
    pub seed: u64,
    pub families: Vec<TaskFamily>,
    pub scope: GradScope,
    pub context_len: usize,
}

impl Default for StudyConfig {
    fn default() -> Self {
        Self {
            pairs: 8,
            seed: 0,
            families: TaskFamily::ALL.to_vec(),
            scope: GradScope::Adapters,
            context_len: 256,
        }
    }
}

/// One source example per pair, cycling over families so that consecutive
/// pairs come from different tasks. Ids live under `study/`, disjoint from
/// the base corpus.
pub fn study_sources(cfg: &StudyConfig, form: Form, tag: &str) -> Result<Vec<Example>> {
    if cfg.families.len() < 2 || cfg.pairs < 2 {
        return Err(Error::Size("a study needs at least 2 pairs over at least 2 families".into()));
    }
    (0..cfg.pairs)
        .map(|i| {
            let family = cfg.families[i % cfg.families.len()];
            let mut rng = derived_rng(cfg.seed, &[&"study", &(i as u64)]);
            let id = format!("study/{tag}/{i}");
            let mut last_err = None;
            for max_len in [16, 8, 4, 3] {
                let input = family.sample_input(&mut rng, max_len);
                match study_fit(family, &input, cfg.context_len) {
                    Ok(()) => {
                        let (q, r) = render(family, &input, form)?;
                        return Example::from_text(id, family.name(), &q, &r, cfg.context_len);
                    }
                    Err(e @ Error::Length(_)) => last_err = Some(e),
                    Err(e) => return Err(e),
                }
            }
            Err(last_err.expect("at least one attempt"))
        })
        .collect()
}

/// Checks that `input` fits the context in every form under the strategies
/// the studies apply to that form, so paired negative and positive sources can share it.
fn study_fit(family: TaskFamily, input: &str, context_len: usize) -> Result<()> {
    let uses: [(Form, &[StrategyKind]); 3] = [
        (Form::Plain, &[StrategyKind::Cot]),
        (Form::Negative, &[StrategyKind::Clarify, StrategyKind::RespondEval]),
        (Form::Positive, &[StrategyKind::RespondEval]),
    ];
    for (form, kinds) in uses {
        let (q, r) = render(family, input, form)?;
        let z = Example::from_text("fit", family.name(), &q, &r, context_len)?;
        for &kind in kinds {
            make_variant(&z, kind, 0, context_len)?;
        }
    }
    Ok(())
}

fn variants(set: &[Example], kind: StrategyKind, cfg: &StudyConfig) -> Result<Vec<Example>> {
    set.iter().map(|z| make_variant(z, kind, cfg.seed, cfg.context_len)).collect()
}

fn analogs(set: &[Example], cfg: &StudyConfig) -> Result<Vec<Example>> {
    set.iter().map(|z| analog_of(z, cfg.seed, cfg.context_len)).collect()
}

/// Named example sets and the labelled pairings traced over them.
#[derive(Debug, Clone)]
pub struct StudyDesign {
    pub kind: StrategyKind,
    pub sets: Vec<(String, Vec<Example>)>,
    pub pairings: Vec<(MetricLabel, PairedSets)>,
}

impl StudyDesign {
    pub fn metric_names(&self) -> Vec<String> {
        self.pairings
            .iter()
            .flat_map(|(l, _)| [l.in_task_name(), l.cross_task_name()])
            .collect()
    }
}

fn pair(probe: &str, target: &str, probes: &[Example], evals: &[Example]) -> Result<(MetricLabel, PairedSets)> {
    Ok((MetricLabel::new(probe, target), PairedSets::new(probes.to_vec(), evals.to_vec())?))
}

/// Example sets for one study.
///
/// * cot: plain evaluation set `Z`, strategy probes are CoT variants of
///   same-task analogs, baseline probes are the analogs themselves.
/// * clarify: negatives `Z_neg`, their clarified positives `Z_pos`, and
///   clarification examples mapping each negative query to its restatement,
///   traced against analog sets `Z'_pos` and `Z'_neg`.
/// * respond_eval: evaluation-data variants of `Z_pos` and `Z_neg` traced
///   against `Z'_pos` and `Z'_neg`, with `Z_pos` as the baseline.
pub fn design_study(kind: StrategyKind, cfg: &StudyConfig) -> Result<StudyDesign> {
    match kind {
        StrategyKind::Cot => {
            let evals = study_sources(cfg, Form::Plain, "cot/eval")?;
            let similar = analogs(&evals, cfg)?;
            let cot = variants(&similar, StrategyKind::Cot, cfg)?;
            let pairings = vec![
                pair("CoT", "non-CoT", &cot, &evals)?,
                pair("non-CoT", "non-CoT", &similar, &evals)?,
            ];
            Ok(StudyDesign {
                kind,
                sets: vec![("eval".into(), evals), ("similar".into(), similar), ("cot".into(), cot)],
                pairings,
            })
        }
        StrategyKind::Clarify | StrategyKind::RespondEval => {
            let tag = kind.name();
            let neg = study_sources(cfg, Form::Negative, &format!("{tag}/neg"))?;
            let pos = study_sources(cfg, Form::Positive, &format!("{tag}/pos"))?;
            let neg_similar = analogs(&neg, cfg)?;
            let pos_similar = analogs(&pos, cfg)?;
            let mut sets = vec![
                ("neg".to_string(), neg.clone()),
                ("pos".to_string(), pos.clone()),
                ("neg_similar".to_string(), neg_similar.clone()),
                ("pos_similar".to_string(), pos_similar.clone()),
            ];
            let mut pairings = Vec::new();
            if kind == StrategyKind::Clarify {
                let clarify = variants(&neg, StrategyKind::Clarify, cfg)?;
                pairings.push(pair("Clarify", "Pos", &clarify, &pos_similar)?);
                pairings.push(pair("Clarify", "Neg", &clarify, &neg_similar)?);
                sets.push(("clarify".into(), clarify));
            } else {
                let eval_pos = variants(&pos, StrategyKind::RespondEval, cfg)?;
                let eval_neg = variants(&neg, StrategyKind::RespondEval, cfg)?;
                pairings.push(pair("EvalPos", "Pos", &eval_pos, &pos_similar)?);
                pairings.push(pair("EvalPos", "Neg", &eval_pos, &neg_similar)?);
                pairings.push(pair("EvalNeg", "Pos", &eval_neg, &pos_similar)?);
                pairings.push(pair("EvalNeg", "Neg", &eval_neg, &neg_similar)?);
                sets.push(("eval_pos".into(), eval_pos));
                sets.push(("eval_neg".into(), eval_neg));
            }
            pairings.push(pair("Pos", "Pos", &pos, &pos_similar)?);
            pairings.push(pair("Pos", "Neg", &pos, &neg_similar)?);
            Ok(StudyDesign { kind, sets, pairings })
        }
    }
}

/// Traces of every metric in a study over one checkpoint series.
#[derive(Debug, Clone)]
pub struct StudyBundle {
    pub kind: StrategyKind,
    pub run_id: String,
    pub design: StudyDesign,
    pub traces: Vec<InfluenceTrace>,
}

impl StudyBundle {
    /// `(step, metric, value)` rows ordered by step, then by metric order.
    pub fn rows(&self) -> Vec<(u64, String, f64)> {
        crate::influence::trace_rows(&self.traces)
    }
}

pub fn run_swift_study(
    kind: StrategyKind,
    cfg: &StudyConfig,
    series: &CheckpointSeries,
    cache: &GradientCache,
) -> Result<StudyBundle> {
    let design = design_study(kind, cfg)?;
    let traces = design
        .pairings
        .iter()
        .map(|(label, sets)| trace(sets, series, label.clone(), cache))
        .collect::<Result<Vec<_>>>()?;
    Ok(StudyBundle {
        kind,
        run_id: series.run_id.clone(),
        design,
        traces,
    })
}
