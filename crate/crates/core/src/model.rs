//! Byte-level causal decoder with frozen base weights and low-rank adapters
//! on the MLP up and down projections.
//!
//! Token layout of an example: `BOS query SEP response EOS`. The model reads
//! every token but the last and predicts the next one. Only the positions
//! predicting response tokens and the end token contribute to the loss, and
//! the loss is their sum.

use std::collections::BTreeMap;
use std::hash::Hasher;
use std::ops::Range;

use fnv::FnvHasher;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const BOS: u32 = 256;
pub const SEP: u32 = 257;
pub const EOS: u32 = 258;
pub const PAD: u32 = 259;
pub const BYTE_VOCAB: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_len: usize,
    pub adapter_rank: usize,
    pub adapter_alpha: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            vocab_size: 260,
            embed_dim: 64,
            layers: 2,
            heads: 2,
            context_len: 256,
            adapter_rank: 8,
            adapter_alpha: 64.0,
        }
    }
}

impl ModelConfig {
    /// Adapter settings used for the original large-model runs.
    pub fn paper_scale_adapter() -> (usize, f64) {
        (64, 512.0)
    }

    pub fn mlp_dim(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn adapter_scale(&self) -> f64 {
        self.adapter_alpha / self.adapter_rank as f64
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.vocab_size < BYTE_VOCAB + 4 {
            return bad(format!("vocab_size {} < 260", self.vocab_size));
        }
        if self.embed_dim == 0 || self.layers == 0 || self.heads == 0 || self.context_len < 4 {
            return bad("embed_dim, layers, heads must be positive and context_len >= 4".into());
        }
        if self.embed_dim % self.heads != 0 {
            return bad(format!(
                "embed_dim {} not divisible by heads {}",
                self.embed_dim, self.heads
            ));
        }
        if self.adapter_rank == 0 || self.adapter_rank > self.embed_dim.min(self.mlp_dim()) {
            return bad(format!(
                "adapter_rank {} outside 1..={}",
                self.adapter_rank, self.embed_dim
            ));
        }
        if !(self.adapter_alpha.is_finite() && self.adapter_alpha > 0.0) {
            return bad(format!("adapter_alpha {} must be positive", self.adapter_alpha));
        }
        Ok(())
    }

    /// Number of trainable adapter parameters, `Σ r·(in + out)`.
    pub fn adapter_param_count(&self) -> usize {
        let per_layer = 2 * self.adapter_rank * (self.embed_dim + self.mlp_dim());
        self.layers * per_layer
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Query,
    Response,
}

/// Maps UTF-8 text to byte tokens. Budget is the number of token slots the
/// text may occupy.
pub fn encode(text: &str, role: Role, budget: usize) -> Result<Vec<u32>> {
    if text.is_empty() {
        return Err(Error::Length(format!("empty {role:?} text")));
    }
    if text.len() > budget {
        return Err(Error::Length(format!(
            "{role:?} of {} bytes exceeds budget of {budget}",
            text.len()
        )));
    }
    Ok(text.bytes().map(u32::from).collect())
}

/// Inverse of [`encode`]; special tokens are dropped.
pub fn decode(tokens: &[u32]) -> Result<String> {
    let bytes: Vec<u8> = tokens
        .iter()
        .filter(|&&t| (t as usize) < BYTE_VOCAB)
        .map(|&t| t as u8)
        .collect();
    String::from_utf8(bytes).map_err(|e| Error::Length(format!("token bytes are not UTF-8: {e}")))
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Example {
    pub id: String,
    pub task: String,
    pub query: Vec<u32>,
    pub response: Vec<u32>,
}

impl Example {
    pub fn from_text(
        id: impl Into<String>,
        task: impl Into<String>,
        query: &str,
        response: &str,
        context_len: usize,
    ) -> Result<Self> {
        // BOS, SEP and EOS take three of the sequence slots; the model input
        // drops the final token, so the input length is |q| + |r| + 2.
        let budget = context_len.saturating_sub(2);
        let q = encode(query, Role::Query, budget)?;
        let r = encode(response, Role::Response, budget)?;
        let ex = Self {
            id: id.into(),
            task: task.into(),
            query: q,
            response: r,
        };
        ex.check_len(context_len)?;
        Ok(ex)
    }

    pub fn query_text(&self) -> Result<String> {
        decode(&self.query)
    }

    pub fn response_text(&self) -> Result<String> {
        decode(&self.response)
    }

    /// Model input length: query + separator + response + end.
    pub fn input_len(&self) -> usize {
        self.query.len() + self.response.len() + 2
    }

    pub fn check_len(&self, context_len: usize) -> Result<()> {
        if self.query.is_empty() || self.response.is_empty() {
            return Err(Error::Length(format!("example {} has an empty side", self.id)));
        }
        if self.input_len() > context_len {
            return Err(Error::Length(format!(
                "example {} needs {} positions, context is {context_len}",
                self.id,
                self.input_len()
            )));
        }
        Ok(())
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        self.check_len(cfg.context_len)?;
        if let Some(t) = self
            .query
            .iter()
            .chain(&self.response)
            .find(|&&t| t as usize >= cfg.vocab_size)
        {
            return Err(Error::Length(format!("token {t} outside vocabulary")));
        }
        Ok(())
    }

    /// Full token sequence `BOS q SEP r EOS`.
    pub fn sequence(&self) -> Vec<u32> {
        let mut s = Vec::with_capacity(self.input_len() + 1);
        s.push(BOS);
        s.extend_from_slice(&self.query);
        s.push(SEP);
        s.extend_from_slice(&self.response);
        s.push(EOS);
        s
    }

    /// Input positions whose next-token prediction belongs to the completion.
    pub fn completion_positions(&self) -> Range<usize> {
        self.query.len() + 1..self.input_len()
    }
}

/// Which parameters receive gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradScope {
    #[default]
    Adapters,
    All,
}

pub type ParamMap = BTreeMap<String, Tensor>;

/// Parameters at one training step. Base parameters are frozen; adapters
/// are the trainable subset. Iteration order of both maps is canonical.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub step: u64,
    pub config: ModelConfig,
    pub base: ParamMap,
    pub adapters: ParamMap,
}

fn layer_key(l: usize, rest: &str) -> String {
    format!("l{l:02}.{rest}")
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape is positive")
}

fn filled(shape: &[usize], v: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), vec![v; n]).expect("shape is positive")
}

impl ModelState {
    /// Random base weights and fresh adapters (A random, B zero) from `seed`.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim;
        let f = config.mlp_dim();
        let v = config.vocab_size;
        let emb = 0.1 * 3f64.sqrt();
        let fan = |n: usize| (1.0 / n as f64).sqrt() * 3f64.sqrt();
        let mut base = ParamMap::new();
        base.insert("tok_emb".into(), uniform(&mut rng, &[v, d], emb));
        base.insert("pos_emb".into(), uniform(&mut rng, &[config.context_len, d], emb));
        for l in 0..config.layers {
            base.insert(layer_key(l, "ln1.gain"), filled(&[d], 1.0));
            base.insert(layer_key(l, "ln1.bias"), Tensor::zeros(&[d]));
            for w in ["attn.wq", "attn.wk", "attn.wv", "attn.wo"] {
                base.insert(layer_key(l, w), uniform(&mut rng, &[d, d], fan(d)));
            }
            base.insert(layer_key(l, "ln2.gain"), filled(&[d], 1.0));
            base.insert(layer_key(l, "ln2.bias"), Tensor::zeros(&[d]));
            base.insert(layer_key(l, "mlp.up.weight"), uniform(&mut rng, &[d, f], fan(d)));
            base.insert(layer_key(l, "mlp.up.bias"), Tensor::zeros(&[f]));
            base.insert(layer_key(l, "mlp.down.weight"), uniform(&mut rng, &[f, d], fan(f)));
            base.insert(layer_key(l, "mlp.down.bias"), Tensor::zeros(&[d]));
        }
        base.insert("ln_f.gain".into(), filled(&[d], 1.0));
        base.insert("ln_f.bias".into(), Tensor::zeros(&[d]));
        // half-width head keeps initial logits near unit scale
        base.insert("lm_head".into(), uniform(&mut rng, &[d, v], 0.5 * fan(d)));

        let mut state = Self {
            step: 0,
            config,
            base,
            adapters: ParamMap::new(),
        };
        state.reset_adapters(rng.gen())?;
        Ok(state)
    }

    /// Reinitialize adapters: A uniform in ±1/√in, B zero.
    pub fn reset_adapters(&mut self, seed: u64) -> Result<()> {
        self.config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, f, r) = (self.config.embed_dim, self.config.mlp_dim(), self.config.adapter_rank);
        self.adapters.clear();
        for l in 0..self.config.layers {
            for (name, din, dout) in [("mlp.up", d, f), ("mlp.down", f, d)] {
                let bound = (1.0 / din as f64).sqrt();
                self.adapters
                    .insert(layer_key(l, &format!("{name}.lora_a")), uniform(&mut rng, &[din, r], bound));
                self.adapters
                    .insert(layer_key(l, &format!("{name}.lora_b")), Tensor::zeros(&[r, dout]));
            }
        }
        Ok(())
    }

    /// FNV-1a over step, config and every parameter's name, shape and bits.
    pub fn fingerprint(&self) -> u64 {
        let mut h = FnvHasher::default();
        h.write_u64(self.step);
        h.write(serde_json::to_string(&self.config).unwrap_or_default().as_bytes());
        for (name, t) in self.base.iter().chain(&self.adapters) {
            h.write(name.as_bytes());
            for &d in t.shape() {
                h.write_usize(d);
            }
            for v in t.data() {
                h.write_u64(v.to_bits());
            }
        }
        h.finish()
    }

    pub fn adapter_len(&self) -> usize {
        self.adapters.values().map(Tensor::len).sum()
    }

    pub fn base_len(&self) -> usize {
        self.base.values().map(Tensor::len).sum()
    }

    /// Adapter values flattened in canonical order.
    pub fn adapter_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.adapter_len());
        for t in self.adapters.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Flattened parameters in `scope`: adapters first, then base if included.
    pub fn param_vector(&self, scope: GradScope) -> Vec<f64> {
        let mut out = self.adapter_vector();
        if scope == GradScope::All {
            for t in self.base.values() {
                out.extend_from_slice(t.data());
            }
        }
        out
    }

    /// Writes back a flat vector laid out like [`ModelState::param_vector`].
    pub fn set_param_vector(&mut self, scope: GradScope, values: &[f64]) -> Result<()> {
        let expect = match scope {
            GradScope::Adapters => self.adapter_len(),
            GradScope::All => self.adapter_len() + self.base_len(),
        };
        if values.len() != expect {
            return Err(Error::Dimension(format!(
                "parameter vector of {} values, expected {expect}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Tensor(crate::tensor::TensorError::Numeric(format!(
                "non-finite parameter at flat index {i}"
            ))));
        }
        let mut offset = 0;
        let maps: Vec<&mut ParamMap> = match scope {
            GradScope::Adapters => vec![&mut self.adapters],
            GradScope::All => vec![&mut self.adapters, &mut self.base],
        };
        for map in maps {
            for t in map.values_mut() {
                let n = t.len();
                t.data_mut().copy_from_slice(&values[offset..offset + n]);
                offset += n;
            }
        }
        Ok(())
    }
}

struct Params {
    vars: BTreeMap<String, Var>,
}

impl Params {
    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }
}

fn register(tape: &mut Tape, state: &ModelState, scope: GradScope) -> (Params, Vec<Var>, Vec<Var>) {
    let mut vars = BTreeMap::new();
    let mut adapter_vars = Vec::with_capacity(state.adapters.len());
    let mut base_vars = Vec::with_capacity(state.base.len());
    for (name, t) in &state.adapters {
        let v = tape.param(t.clone());
        adapter_vars.push(v);
        vars.insert(name.clone(), v);
    }
    for (name, t) in &state.base {
        let v = match scope {
            GradScope::All => tape.param(t.clone()),
            GradScope::Adapters => tape.constant(t.clone()),
        };
        base_vars.push(v);
        vars.insert(name.clone(), v);
    }
    (Params { vars }, adapter_vars, base_vars)
}

/// `x·W + (alpha/r)·((x·A)·B)`
fn adapted_linear(tape: &mut Tape, p: &Params, x: Var, prefix: &str, scale: f64) -> Result<Var> {
    let base = tape.matmul(x, p.get(&format!("{prefix}.weight")))?;
    let delta = adapter_delta(tape, p, x, prefix, scale)?;
    Ok(tape.add(base, delta)?)
}

fn adapter_delta(tape: &mut Tape, p: &Params, x: Var, prefix: &str, scale: f64) -> Result<Var> {
    let xa = tape.matmul(x, p.get(&format!("{prefix}.lora_a")))?;
    let xab = tape.matmul(xa, p.get(&format!("{prefix}.lora_b")))?;
    Ok(tape.scale(xab, scale)?)
}

/// Runs the decoder over `tokens` and returns the `[T, vocab]` logits node.
fn forward(tape: &mut Tape, state: &ModelState, p: &Params, tokens: &[u32]) -> Result<Var> {
    let cfg = &state.config;
    let t = tokens.len();
    if t == 0 || t > cfg.context_len {
        return Err(Error::Length(format!(
            "{t} input positions, context is {}",
            cfg.context_len
        )));
    }
    let ids: Vec<usize> = tokens.iter().map(|&x| x as usize).collect();
    let positions: Vec<usize> = (0..t).collect();
    let tok = tape.gather(p.get("tok_emb"), &ids)?;
    let pos = tape.gather(p.get("pos_emb"), &positions)?;
    let mut x = tape.add(tok, pos)?;
    let hd = cfg.embed_dim / cfg.heads;
    let attn_scale = 1.0 / (hd as f64).sqrt();
    let lora_scale = cfg.adapter_scale();
    for l in 0..cfg.layers {
        let k = |s: &str| layer_key(l, s);
        let h = tape.layer_norm(x, p.get(&k("ln1.gain")), p.get(&k("ln1.bias")))?;
        let q = tape.matmul(h, p.get(&k("attn.wq")))?;
        let kk = tape.matmul(h, p.get(&k("attn.wk")))?;
        let v = tape.matmul(h, p.get(&k("attn.wv")))?;
        let mut heads = Vec::with_capacity(cfg.heads);
        for head in 0..cfg.heads {
            let qh = tape.slice_cols(q, head * hd, hd)?;
            let kh = tape.slice_cols(kk, head * hd, hd)?;
            let vh = tape.slice_cols(v, head * hd, hd)?;
            let scores = tape.matmul_t(qh, kh)?;
            let scores = tape.scale(scores, attn_scale)?;
            let probs = tape.causal_softmax(scores)?;
            heads.push(tape.matmul(probs, vh)?);
        }
        let joined = tape.concat_cols(&heads)?;
        let attn = tape.matmul(joined, p.get(&k("attn.wo")))?;
        x = tape.add(x, attn)?;

        let h2 = tape.layer_norm(x, p.get(&k("ln2.gain")), p.get(&k("ln2.bias")))?;
        let up = adapted_linear(tape, p, h2, &k("mlp.up"), lora_scale)?;
        let up = tape.add_row(up, p.get(&k("mlp.up.bias")))?;
        let act = tape.gelu(up)?;
        let down = adapted_linear(tape, p, act, &k("mlp.down"), lora_scale)?;
        let down = tape.add_row(down, p.get(&k("mlp.down.bias")))?;
        x = tape.add(x, down)?;
    }
    let xf = tape.layer_norm(x, p.get("ln_f.gain"), p.get("ln_f.bias"))?;
    Ok(tape.matmul(xf, p.get("lm_head"))?)
}

/// Loss and flat gradient of one example.
#[derive(Debug, Clone)]
pub struct LossGrad {
    pub loss: f64,
    /// Canonical order: adapters, then base parameters when in scope.
    pub grad: Vec<f64>,
}

/// Completion loss with gradient, restricted to `positions` when given
/// (each must be a completion position).
pub fn loss_and_grad(
    state: &ModelState,
    z: &Example,
    scope: GradScope,
    positions: Option<&[usize]>,
) -> Result<LossGrad> {
    z.validate(&state.config)?;
    let mut tape = Tape::new();
    let (params, adapter_vars, base_vars) = register(&mut tape, state, scope);
    let loss = loss_node(&mut tape, state, &params, z, positions)?;
    let value = tape.value(loss).data()[0];
    let grads = tape.backward(loss)?;
    let mut grad = Vec::with_capacity(state.adapter_len());
    for v in adapter_vars {
        grads.extend_into(v, &mut grad);
    }
    if scope == GradScope::All {
        for v in base_vars {
            grads.extend_into(v, &mut grad);
        }
    }
    Ok(LossGrad { loss: value, grad })
}

fn loss_node(
    tape: &mut Tape,
    state: &ModelState,
    params: &Params,
    z: &Example,
    positions: Option<&[usize]>,
) -> Result<Var> {
    let seq = z.sequence();
    let input = &seq[..seq.len() - 1];
    let completion = z.completion_positions();
    if let Some(ps) = positions {
        if let Some(bad) = ps.iter().find(|p| !completion.contains(p)) {
            return Err(Error::Length(format!(
                "position {bad} is not a completion position of {}",
                z.id
            )));
        }
    }
    let targets: Vec<Option<usize>> = (0..input.len())
        .map(|i| {
            let keep = completion.contains(&i) && positions.map_or(true, |ps| ps.contains(&i));
            keep.then(|| seq[i + 1] as usize)
        })
        .collect();
    let logits = forward(tape, state, params, input)?;
    let per_pos = tape.softmax_xent(logits, &targets)?;
    Ok(tape.sum(per_pos)?)
}

/// Summed negative log-likelihood of the response tokens and end token.
pub fn completion_loss(state: &ModelState, z: &Example) -> Result<f64> {
    z.validate(&state.config)?;
    let mut tape = Tape::new();
    let (params, _, _) = register(&mut tape, state, GradScope::Adapters);
    let loss = loss_node(&mut tape, state, &params, z, None)?;
    Ok(tape.value(loss).data()[0])
}

/// Next-token logits `[T, vocab]` for an arbitrary input token sequence.
pub fn logits(state: &ModelState, tokens: &[u32]) -> Result<Tensor> {
    if let Some(t) = tokens.iter().find(|&&t| t as usize >= state.config.vocab_size) {
        return Err(Error::Length(format!("token {t} outside vocabulary")));
    }
    let mut tape = Tape::new();
    let (params, _, _) = register(&mut tape, state, GradScope::Adapters);
    let out = forward(&mut tape, state, &params, tokens)?;
    Ok(tape.value(out).clone())
}

/// Per-example loss gradient over a parameter subset, tagged with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub run_id: String,
    pub step: u64,
    pub example_id: String,
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Adapter gradient of the summed completion loss.
pub fn example_gradient(state: &ModelState, z: &Example, run_id: &str) -> Result<GradientVector> {
    example_gradient_in(state, z, run_id, GradScope::Adapters)
}

pub fn example_gradient_in(
    state: &ModelState,
    z: &Example,
    run_id: &str,
    scope: GradScope,
) -> Result<GradientVector> {
    let lg = loss_and_grad(state, z, scope, None)?;
    Ok(GradientVector {
        run_id: run_id.to_string(),
        step: state.step,
        example_id: z.id.clone(),
        values: lg.grad,
    })
}
