//! On-disk formats: JSONL datasets, binary checkpoints, run manifests,
//! trace CSVs and SVG charts. Every write goes to a temporary file in the
//! target directory and is renamed into place.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::hash::Hasher;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use fnv::FnvHasher;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::influence::{InfluenceTrace, PairedSets};
use crate::model::{Example, ModelConfig, ModelState, ParamMap};
use crate::tensor::Tensor;
use crate::trainer::{Checkpoint, CheckpointSeries, TrainConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GTCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h = FnvHasher::default();
    h.write(bytes);
    h.finish()
}

/// Writes `bytes` to `path` atomically.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| Error::io(dir, e))?;
    tmp.write_all(bytes).map_err(|e| Error::io(path, e))?;
    tmp.as_file().sync_all().map_err(|e| Error::io(path, e))?;
    tmp.persist(path).map_err(|e| Error::io(path, e.error))?;
    Ok(())
}

fn read(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct Record {
    id: String,
    task: String,
    query: String,
    response: String,
}

pub fn dataset_to_jsonl(data: &[Example]) -> Result<String> {
    let mut out = String::new();
    for z in data {
        let rec = Record {
            id: z.id.clone(),
            task: z.task.clone(),
            query: z.query_text()?,
            response: z.response_text()?,
        };
        out.push_str(&serde_json::to_string(&rec)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, data: &[Example]) -> Result<()> {
    write_atomic(path, dataset_to_jsonl(data)?.as_bytes())
}

/// Loads a JSONL dataset, tokenizing each record for `context_len`.
pub fn load_dataset(path: &Path, context_len: usize) -> Result<Vec<Example>> {
    let text = String::from_utf8(read(path)?).map_err(|e| Error::Corruption {
        path: path.into(),
        reason: format!("not UTF-8: {e}"),
    })?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, line)| {
            let rec: Record = serde_json::from_str(line).map_err(|e| Error::Corruption {
                path: path.into(),
                reason: format!("line {}: {e}", n + 1),
            })?;
            Example::from_text(rec.id, rec.task, &rec.query, &rec.response, context_len)
        })
        .collect()
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointMeta {
    step: u64,
    config: ModelConfig,
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

/// Serializes a model state.
///
/// Layout (little endian): magic, `u32` version, `u32` metadata length and
/// metadata JSON, `u32` tensor count, then per tensor a `u32`-prefixed name,
/// `u32` rank, `u64` dims and `u64` payload offset; then the `f64` payload;
/// finally a `u64` FNV-1a hash of everything before it.
pub fn checkpoint_bytes(state: &ModelState) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(&CheckpointMeta {
        step: state.step,
        config: state.config.clone(),
    })?;
    let tensors: Vec<(String, &Tensor)> = state
        .adapters
        .iter()
        .map(|(k, t)| (format!("adapter/{k}"), t))
        .chain(state.base.iter().map(|(k, t)| (format!("base/{k}"), t)))
        .collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, CHECKPOINT_VERSION);
    put_u32(&mut buf, meta.len() as u32);
    buf.extend_from_slice(&meta);
    put_u32(&mut buf, tensors.len() as u32);
    let mut offset = 0u64;
    for (name, t) in &tensors {
        put_u32(&mut buf, name.len() as u32);
        buf.extend_from_slice(name.as_bytes());
        put_u32(&mut buf, t.shape().len() as u32);
        for &d in t.shape() {
            put_u64(&mut buf, d as u64);
        }
        put_u64(&mut buf, offset);
        offset += 8 * t.len() as u64;
    }
    for (_, t) in &tensors {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let hash = fnv1a(&buf);
    put_u64(&mut buf, hash);
    Ok(buf)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn corrupt(&self, reason: impl Into<String>) -> Error {
        Error::Corruption {
            path: self.path.into(),
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(self.corrupt(format!("truncated at byte {}", self.pos))),
        }
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses checkpoint bytes; `path` is used for error messages only.
pub fn checkpoint_from_bytes(bytes: &[u8], path: &Path) -> Result<ModelState> {
    let mut c = Cursor { bytes, pos: 0, path };
    if c.take(4)? != CHECKPOINT_MAGIC {
        return Err(c.corrupt("bad magic"));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version(version));
    }
    if bytes.len() < 16 {
        return Err(c.corrupt("truncated"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    if fnv1a(body) != u64::from_le_bytes(tail.try_into().expect("8 bytes")) {
        return Err(c.corrupt("hash mismatch"));
    }
    let mut c = Cursor {
        bytes: body,
        pos: 8,
        path,
    };
    let meta_len = c.u32()? as usize;
    let meta: CheckpointMeta =
        serde_json::from_slice(c.take(meta_len)?).map_err(|e| c.corrupt(format!("metadata: {e}")))?;
    let count = c.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = c.u32()? as usize;
        let name = String::from_utf8(c.take(name_len)?.to_vec()).map_err(|_| c.corrupt("tensor name"))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| Ok(c.u64()? as usize)).collect::<Result<Vec<_>>>()?;
        let offset = c.u64()? as usize;
        entries.push((name, shape, offset));
    }
    let payload = &body[c.pos..];
    let mut base = ParamMap::new();
    let mut adapters = ParamMap::new();
    for (name, shape, offset) in entries {
        let n: usize = shape.iter().product();
        let end = offset
            .checked_add(8 * n)
            .filter(|&e| e <= payload.len())
            .ok_or_else(|| c.corrupt(format!("tensor {name} exceeds payload")))?;
        let data: Vec<f64> = payload[offset..end]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, data).map_err(|e| c.corrupt(format!("tensor {name}: {e}")))?;
        if let Some(k) = name.strip_prefix("adapter/") {
            adapters.insert(k.to_string(), t);
        } else if let Some(k) = name.strip_prefix("base/") {
            base.insert(k.to_string(), t);
        } else {
            return Err(c.corrupt(format!("unknown tensor group in {name}")));
        }
    }
    let state = ModelState {
        step: meta.step,
        config: meta.config,
        base,
        adapters,
    };
    // a structurally valid file must still describe a complete model
    let reference = ModelState::init(state.config.clone(), 0).map_err(|e| c.corrupt(e.to_string()))?;
    let shapes = |m: &ParamMap| m.iter().map(|(k, t)| (k.clone(), t.shape().to_vec())).collect::<Vec<_>>();
    if shapes(&reference.base) != shapes(&state.base) || shapes(&reference.adapters) != shapes(&state.adapters) {
        return Err(c.corrupt("tensor set does not match the model configuration"));
    }
    Ok(state)
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<u64> {
    let bytes = checkpoint_bytes(state)?;
    write_atomic(path, &bytes)?;
    Ok(fnv1a(&bytes))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    checkpoint_from_bytes(&read(path)?, path)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub step: u64,
    /// Path relative to the manifest's directory.
    pub file: String,
    /// FNV-1a of the file contents, 16 hex digits.
    pub hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Seconds since the Unix epoch; `SOURCE_DATE_EPOCH` when set.
    pub created: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub dataset_size: usize,
    pub lr_schedule: Vec<f64>,
    pub checkpoints: Vec<ManifestEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

pub fn creation_time() -> u64 {
    if let Some(t) = std::env::var("SOURCE_DATE_EPOCH").ok().and_then(|s| s.parse().ok()) {
        return t;
    }
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs())
}

pub fn checkpoint_file_name(step: u64) -> String {
    format!("ckpt-{step:06}.gtck")
}

/// Writes every checkpoint of `series` and a manifest into `dir`.
pub fn save_run(
    dir: &Path,
    series: &CheckpointSeries,
    train: &TrainConfig,
    dataset_size: usize,
) -> Result<RunManifest> {
    let first = series
        .checkpoints
        .first()
        .ok_or_else(|| Error::Size("checkpoint series is empty".into()))?;
    let mut entries = Vec::with_capacity(series.checkpoints.len());
    for ck in &series.checkpoints {
        let file = checkpoint_file_name(ck.step);
        let hash = save_checkpoint(&dir.join(&file), &ck.state)?;
        entries.push(ManifestEntry {
            step: ck.step,
            file,
            hash: format!("{hash:016x}"),
        });
    }
    let manifest = RunManifest {
        run_id: series.run_id.clone(),
        created: creation_time(),
        model: first.state.config.clone(),
        train: train.clone(),
        dataset_size,
        lr_schedule: series.lr_schedule.clone(),
        checkpoints: entries,
    };
    let mut json = serde_json::to_string_pretty(&manifest)?;
    json.push('\n');
    write_atomic(&dir.join(MANIFEST_FILE), json.as_bytes())?;
    Ok(manifest)
}

/// Resolves a run directory or a manifest path to the manifest path.
pub fn manifest_path(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    }
}

/// Loads a manifest and every checkpoint it lists, verifying each hash.
pub fn load_run(path: &Path) -> Result<(RunManifest, CheckpointSeries)> {
    let mpath = manifest_path(path);
    let manifest: RunManifest = serde_json::from_slice(&read(&mpath)?).map_err(|e| Error::Corruption {
        path: mpath.clone(),
        reason: e.to_string(),
    })?;
    let dir = mpath.parent().unwrap_or(Path::new("."));
    let mut checkpoints = Vec::with_capacity(manifest.checkpoints.len());
    for entry in &manifest.checkpoints {
        let file = dir.join(&entry.file);
        let bytes = read(&file)?;
        let hash = format!("{:016x}", fnv1a(&bytes));
        if hash != entry.hash {
            return Err(Error::Corruption {
                path: file,
                reason: format!("hash {hash} does not match manifest {}", entry.hash),
            });
        }
        let state = checkpoint_from_bytes(&bytes, &file)?;
        if state.step != entry.step {
            return Err(Error::Corruption {
                path: file,
                reason: format!("holds step {}, manifest says {}", state.step, entry.step),
            });
        }
        checkpoints.push(Checkpoint {
            step: entry.step,
            state: Arc::new(state),
        });
    }
    if checkpoints.is_empty() {
        return Err(Error::Corruption {
            path: mpath,
            reason: "manifest lists no checkpoints".into(),
        });
    }
    let series = CheckpointSeries {
        run_id: manifest.run_id.clone(),
        checkpoints,
        lr_schedule: manifest.lr_schedule.clone(),
    };
    Ok((manifest, series))
}

pub type TraceRow = (u64, String, f64);

/// `step,metric,value` with shortest round-trip decimals.
pub fn trace_csv(rows: &[TraceRow]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "metric", "value"])?;
    for (step, metric, value) in rows {
        w.write_record([step.to_string(), metric.clone(), value.to_string()])?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<memory>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

pub fn save_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    write_atomic(path, trace_csv(rows)?.as_bytes())
}

pub fn load_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Corruption {
            path: path.into(),
            reason: format!("{other:?}"),
        },
    })?;
    if r.headers()?.iter().collect::<Vec<_>>() != ["step", "metric", "value"] {
        return Err(Error::Corruption {
            path: path.into(),
            reason: "expected header step,metric,value".into(),
        });
    }
    r.deserialize::<TraceRow>()
        .map(|row| row.map_err(Error::from))
        .collect()
}

/// Full RelInf matrices as `step,metric,probe,eval,value`.
pub fn matrix_csv(traces: &[(&InfluenceTrace, &PairedSets)]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "metric", "probe", "eval", "value"])?;
    for (t, sets) in traces {
        let metric = t.label.pair_name();
        for rec in &t.records {
            for (i, row) in rec.matrix.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    w.write_record([
                        rec.step.to_string(),
                        metric.clone(),
                        sets.probes[i].id.clone(),
                        sets.evals[j].id.clone(),
                        v.to_string(),
                    ])?;
                }
            }
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::io("<memory>", e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line chart of metric value against step, one polyline per metric in
/// first-appearance order.
pub fn render_svg(rows: &[TraceRow], title: &str) -> Result<String> {
    if rows.is_empty() {
        return Err(Error::Size("no rows to plot".into()));
    }
    let mut order: Vec<&str> = Vec::new();
    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for (step, metric, value) in rows {
        if !value.is_finite() {
            return Err(Error::Size(format!("cannot plot non-finite value for {metric} at step {step}")));
        }
        if !series.contains_key(metric.as_str()) {
            order.push(metric);
        }
        series.entry(metric).or_default().push((*step as f64, *value));
    }
    let (w, h) = (720.0, 420.0);
    let (left, right, top, bottom) = (70.0, 230.0, 40.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);
    let xs = rows.iter().map(|r| r.0 as f64);
    let ys = rows.iter().map(|r| r.2);
    let (mut x0, mut x1) = (xs.clone().fold(f64::INFINITY, f64::min), xs.fold(f64::NEG_INFINITY, f64::max));
    let (mut y0, mut y1) = (ys.clone().fold(f64::INFINITY, f64::min), ys.fold(f64::NEG_INFINITY, f64::max));
    if x1 == x0 {
        x0 -= 1.0;
        x1 += 1.0;
    }
    if y1 == y0 {
        y0 -= 1.0;
        y1 += 1.0;
    }
    let px = |x: f64| left + (x - x0) / (x1 - x0) * pw;
    let py = |y: f64| top + (y1 - y) / (y1 - y0) * ph;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="22" text-anchor="middle" font-size="14">{}</text>"#, left + pw / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<g stroke="black" fill="none"><line x1="{left}" y1="{b}" x2="{r}" y2="{b}"/><line x1="{left}" y1="{top}" x2="{left}" y2="{b}"/></g>"#,
        b = top + ph,
        r = left + pw
    );
    for k in 0..=4 {
        let fx = x0 + (x1 - x0) * k as f64 / 4.0;
        let fy = y0 + (y1 - y0) * k as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{}</text>"#,
            px(fx),
            top + ph + 18.0,
            (fx * 100.0).round() / 100.0
        );
        let _ = writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{:.3}</text>"#,
            left - 6.0,
            py(fy) + 4.0,
            fy
        );
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, left + pw / 2.0, h - 10.0);
    for (k, metric) in order.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let pts: Vec<String> = series[metric]
            .iter()
            .map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y)))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline data-metric="{}" fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            escape(metric),
            pts.join(" ")
        );
        let ly = top + 10.0 + 20.0 * k as f64;
        let lx = left + pw + 15.0;
        let _ = writeln!(
            s,
            r#"<line x1="{lx}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            lx + 20.0,
            lx + 26.0,
            ly + 4.0,
            escape(metric)
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}
