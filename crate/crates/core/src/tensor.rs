//! Dense f64 tensors and a tape-based reverse-mode differentiator.
//!
//! Every operation appends a node to a [`Tape`]; node indices are handed out
//! in creation order, so the tape is acyclic and its creation order is a
//! valid topological order. [`Tape::backward`] walks the nodes in reverse
//! and accumulates adjoints for every node that depends on a parameter.
//!
//! All loops run in sequential index order. Two tapes built from identical
//! inputs therefore produce bit-identical values and gradients.

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("numeric error: {0}")]
    Numeric(String),
    #[error("tape state error: {0}")]
    State(String),
}

type Result<T> = std::result::Result<T, TensorError>;

/// Row-major f64 tensor. Dimensions are positive and values finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.is_empty() || shape.iter().any(|&d| d == 0) {
            return Err(TensorError::Dimension(format!(
                "shape {shape:?} must have at least one dimension and no zero sizes"
            )));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(TensorError::Dimension(format!(
                "shape {shape:?} needs {n} values, got {}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::Numeric(format!(
                "non-finite value {} at flat index {i}",
                data[i]
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn scalar(v: f64) -> Result<Self> {
        Self::new(vec![1], vec![v])
    }

    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new(vec![data.len()], data)
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    fn dims2(&self, what: &str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(TensorError::Dimension(format!(
                "{what}: expected a matrix, got shape {s:?}"
            ))),
        }
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normed: Vec<f64>,
        inv_std: Vec<f64>,
    },
    CausalSoftmax(Var),
    SoftmaxXent {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Scale(Var, f64),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;

/// Records forward operations for one reverse sweep.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, false)
    }

    /// Input whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_leaf(t, true)
    }

    fn push_leaf(&mut self, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn live(&self) -> Result<()> {
        if self.consumed {
            Err(TensorError::State("tape already consumed by backward".into()))
        } else {
            Ok(())
        }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(TensorError::Numeric(format!(
                "{} produced non-finite value at flat index {i}",
                op_name(&op)
            )));
        }
        let needs_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value: Tensor { shape, data },
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (m, k) = self.value(a).dims2("matmul lhs")?;
        let (k2, n) = self.value(b).dims2("matmul rhs")?;
        if k != k2 {
            return Err(TensorError::Dimension(format!(
                "matmul [{m},{k}] x [{k2},{n}]"
            )));
        }
        let out = mm(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        let (m, k) = self.value(a).dims2("matmul_t lhs")?;
        let (n, k2) = self.value(b).dims2("matmul_t rhs")?;
        if k != k2 {
            return Err(TensorError::Dimension(format!(
                "matmul_t [{m},{k}] x [{n},{k2}]^T"
            )));
        }
        let out = mm_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push(vec![m, n], out, Op::MatMulT(a, b), &[a, b])
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(TensorError::Dimension(format!(
                "{what}: {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        self.same_shape(a, b, "add")?;
        let out = zip(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Add(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.live()?;
        self.same_shape(a, b, "mul")?;
        let out = zip(self.value(a).data(), self.value(b).data(), |x, y| x * y);
        let shape = self.value(a).shape().to_vec();
        self.push(shape, out, Op::Mul(a, b), &[a, b])
    }

    /// Adds the vector `row: [d]` to every row of `x: [t,d]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        self.live()?;
        let (t, d) = self.value(x).dims2("add_row")?;
        if self.value(row).shape() != [d] {
            return Err(TensorError::Dimension(format!(
                "add_row: row shape {:?} vs width {d}",
                self.value(row).shape()
            )));
        }
        let xs = self.value(x).data();
        let rs = self.value(row).data();
        let mut out = Vec::with_capacity(t * d);
        for i in 0..t {
            for j in 0..d {
                out.push(xs[i * d + j] + rs[j]);
            }
        }
        self.push(vec![t, d], out, Op::AddRow(x, row), &[x, row])
    }

    /// Picks rows of `table: [v,d]` by index, giving `[ids.len(), d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.live()?;
        let (v, d) = self.value(table).dims2("gather")?;
        if ids.is_empty() {
            return Err(TensorError::Dimension("gather: empty index list".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(TensorError::Dimension(format!(
                "gather: index {bad} out of range for {v} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let op = Op::Gather {
            table,
            ids: ids.to_vec(),
        };
        self.push(vec![ids.len(), d], out, op, &[table])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let out = self.value(x).data().iter().map(|&v| gelu(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(shape, out, Op::Gelu(x), &[x])
    }

    /// Row-wise layer normalization with affine gain and bias of shape `[d]`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        self.live()?;
        let (t, d) = self.value(x).dims2("layer_norm")?;
        for (p, what) in [(gain, "gain"), (bias, "bias")] {
            if self.value(p).shape() != [d] {
                return Err(TensorError::Dimension(format!(
                    "layer_norm {what} shape {:?} vs width {d}",
                    self.value(p).shape()
                )));
            }
        }
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut normed = Vec::with_capacity(t * d);
        let mut inv_std = Vec::with_capacity(t);
        let mut out = Vec::with_capacity(t * d);
        for i in 0..t {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for j in 0..d {
                let n = (row[j] - mean) * is;
                normed.push(n);
                out.push(n * g[j] + b[j]);
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normed,
            inv_std,
        };
        self.push(vec![t, d], out, op, &[x, gain, bias])
    }

    /// Row-wise softmax of a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let (t, t2) = self.value(x).dims2("causal_softmax")?;
        if t != t2 {
            return Err(TensorError::Dimension(format!(
                "causal_softmax needs a square matrix, got [{t},{t2}]"
            )));
        }
        let xs = self.value(x).data();
        let mut out = vec![0.0; t * t];
        for i in 0..t {
            let row = &xs[i * t..i * t + i + 1];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..=i {
                let e = (row[j] - max).exp();
                out[i * t + j] = e;
                z += e;
            }
            for j in 0..=i {
                out[i * t + j] /= z;
            }
        }
        self.push(vec![t, t], out, Op::CausalSoftmax(x), &[x])
    }

    /// Per-row softmax cross-entropy of `logits: [t,v]`. Rows whose target is
    /// `None` contribute exactly zero. Output shape `[t]`.
    pub fn softmax_xent(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        self.live()?;
        let (t, v) = self.value(logits).dims2("softmax_xent")?;
        if targets.len() != t {
            return Err(TensorError::Dimension(format!(
                "softmax_xent: {} targets for {t} rows",
                targets.len()
            )));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&c| c >= v) {
            return Err(TensorError::Dimension(format!(
                "softmax_xent: target {bad} out of range for {v} classes"
            )));
        }
        let xs = self.value(logits).data();
        let mut probs = vec![0.0; t * v];
        let mut out = vec![0.0; t];
        for i in 0..t {
            let Some(target) = targets[i] else { continue };
            let row = &xs[i * v..(i + 1) * v];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..v {
                let e = (row[j] - max).exp();
                probs[i * v + j] = e;
                z += e;
            }
            for j in 0..v {
                probs[i * v + j] /= z;
            }
            out[i] = z.ln() - (row[target] - max);
        }
        let op = Op::SoftmaxXent {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push(vec![t], out, op, &[logits])
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.live()?;
        let (t, d) = self.value(x).dims2("slice_cols")?;
        if len == 0 || start + len > d {
            return Err(TensorError::Dimension(format!(
                "slice_cols {start}..{} of width {d}",
                start + len
            )));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(t * len);
        for i in 0..t {
            out.extend_from_slice(&xs[i * d + start..i * d + start + len]);
        }
        self.push(vec![t, len], out, Op::SliceCols { x, start }, &[x])
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        self.live()?;
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Dimension("concat_cols of nothing".into()))?;
        let (t, _) = self.value(*first).dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != t {
                return Err(TensorError::Dimension(format!(
                    "concat_cols row mismatch {r} vs {t}"
                )));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(t * total);
        for i in 0..t {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(vec![t, total], out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        self.live()?;
        if !s.is_finite() {
            return Err(TensorError::Numeric(format!("scale by {s}")));
        }
        let out = self.value(x).data().iter().map(|v| v * s).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(shape, out, Op::Scale(x, s), &[x])
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.live()?;
        let mut acc = 0.0;
        for v in self.value(x).data() {
            acc += v;
        }
        self.push(vec![1], vec![acc], Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar node. The tape cannot be reused afterwards.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        self.live()?;
        if loss.0 >= self.nodes.len() {
            return Err(TensorError::State(format!("unknown node {}", loss.0)));
        }
        if !self.value(loss).is_scalar() {
            return Err(TensorError::Dimension(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        self.consumed = true;
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if self.nodes[loss.0].needs_grad {
            adj[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                adj[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        let grads = adj
            .into_iter()
            .enumerate()
            .map(|(i, g)| match (g, &self.nodes[i].op) {
                (Some(g), Op::Leaf) if self.nodes[i].needs_grad => Some(g),
                _ => None,
            })
            .collect();
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).shape()[1];
                if self.needs(*a) {
                    accumulate(adj, *a, mm_nt(g, self.value(*b).data(), m, n, k));
                }
                if self.needs(*b) {
                    accumulate(adj, *b, mm_tn(self.value(*a).data(), g, m, k, n));
                }
            }
            Op::MatMulT(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).shape()[0];
                if self.needs(*a) {
                    accumulate(adj, *a, mm(g, self.value(*b).data(), m, n, k));
                }
                if self.needs(*b) {
                    accumulate(adj, *b, mm_tn(g, self.value(*a).data(), m, n, k));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.needs(v) {
                        accumulate(adj, v, g.to_vec());
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    accumulate(adj, *a, zip(g, self.value(*b).data(), |x, y| x * y));
                }
                if self.needs(*b) {
                    accumulate(adj, *b, zip(g, self.value(*a).data(), |x, y| x * y));
                }
            }
            Op::AddRow(x, row) => {
                if self.needs(*x) {
                    accumulate(adj, *x, g.to_vec());
                }
                if self.needs(*row) {
                    let (t, d) = dims(self.value(*x));
                    accumulate(adj, *row, col_sums(g, t, d));
                }
            }
            Op::Gather { table, ids } => {
                if self.needs(*table) {
                    let (v, d) = dims(self.value(*table));
                    let mut out = vec![0.0; v * d];
                    for (r, &i) in ids.iter().enumerate() {
                        for j in 0..d {
                            out[i * d + j] += g[r * d + j];
                        }
                    }
                    accumulate(adj, *table, out);
                }
            }
            Op::Gelu(x) => {
                if self.needs(*x) {
                    accumulate(adj, *x, zip(g, self.value(*x).data(), |gy, v| gy * gelu_grad(v)));
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let (t, d) = dims(self.value(*x));
                if self.needs(*bias) {
                    accumulate(adj, *bias, col_sums(g, t, d));
                }
                if self.needs(*gain) {
                    accumulate(adj, *gain, col_sums(&zip(g, normed, |a, b| a * b), t, d));
                }
                if self.needs(*x) {
                    let gs = self.value(*gain).data();
                    let mut out = Vec::with_capacity(t * d);
                    for i in 0..t {
                        let dn: Vec<f64> = (0..d).map(|j| g[i * d + j] * gs[j]).collect();
                        let nr = &normed[i * d..(i + 1) * d];
                        let mean_dn = dn.iter().sum::<f64>() / d as f64;
                        let mean_dn_n = dn.iter().zip(nr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            out.push(inv_std[i] * (dn[j] - mean_dn - nr[j] * mean_dn_n));
                        }
                    }
                    accumulate(adj, *x, out);
                }
            }
            Op::CausalSoftmax(x) => {
                if self.needs(*x) {
                    let t = self.value(*x).shape()[0];
                    let p = node.value.data();
                    let mut out = vec![0.0; t * t];
                    for i in 0..t {
                        let mut dot = 0.0;
                        for j in 0..=i {
                            dot += p[i * t + j] * g[i * t + j];
                        }
                        for j in 0..=i {
                            out[i * t + j] = p[i * t + j] * (g[i * t + j] - dot);
                        }
                    }
                    accumulate(adj, *x, out);
                }
            }
            Op::SoftmaxXent {
                logits,
                targets,
                probs,
            } => {
                if self.needs(*logits) {
                    let (t, v) = dims(self.value(*logits));
                    let mut out = vec![0.0; t * v];
                    for i in 0..t {
                        let Some(target) = targets[i] else { continue };
                        for j in 0..v {
                            out[i * v + j] = g[i] * probs[i * v + j];
                        }
                        out[i * v + target] -= g[i];
                    }
                    accumulate(adj, *logits, out);
                }
            }
            Op::SliceCols { x, start } => {
                if self.needs(*x) {
                    let (t, d) = dims(self.value(*x));
                    let len = node.value.shape()[1];
                    let mut out = vec![0.0; t * d];
                    for i in 0..t {
                        out[i * d + start..i * d + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(adj, *x, out);
                }
            }
            Op::ConcatCols(parts) => {
                let (t, total) = dims(&node.value);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if self.needs(p) {
                        let mut out = Vec::with_capacity(t * w);
                        for i in 0..t {
                            out.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        accumulate(adj, p, out);
                    }
                    offset += w;
                }
            }
            Op::Scale(x, s) => {
                if self.needs(*x) {
                    accumulate(adj, *x, g.iter().map(|v| v * s).collect());
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    accumulate(adj, *x, vec![g[0]; self.value(*x).len()]);
                }
            }
        }
    }
}

/// Parameter adjoints produced by one backward sweep.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; exact zeros when `v` does not reach the loss or is
    /// not a parameter.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => Tensor {
                shape: self.shapes[v.0].clone(),
                data: g.clone(),
            },
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }

    /// Like [`Gradients::get`] but appends the raw values to `out`.
    pub fn extend_into(&self, v: Var, out: &mut Vec<f64>) {
        match &self.grads[v.0] {
            Some(g) => out.extend_from_slice(g),
            None => out.extend(std::iter::repeat(0.0).take(self.shapes[v.0].iter().product())),
        }
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::MatMulT(..) => "matmul_t",
        Op::Add(..) => "add",
        Op::Mul(..) => "mul",
        Op::AddRow(..) => "add_row",
        Op::Gather { .. } => "gather",
        Op::Gelu(..) => "gelu",
        Op::LayerNorm { .. } => "layer_norm",
        Op::CausalSoftmax(..) => "causal_softmax",
        Op::SoftmaxXent { .. } => "softmax_xent",
        Op::SliceCols { .. } => "slice_cols",
        Op::ConcatCols(..) => "concat_cols",
        Op::Scale(..) => "scale",
        Op::Sum(..) => "sum",
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(&g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.shape[0], t.shape[1])
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn col_sums(g: &[f64], t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    for i in 0..t {
        for j in 0..d {
            out[j] += g[i * d + j];
        }
    }
    out
}

pub(crate) fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let th = (c * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * c * (1.0 + 3.0 * GELU_COEF * x * x)
}

/// `a[m,k] · b[k,n]`
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let br = &b[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * br[j];
            }
        }
    }
    out
}

/// `a[m,k] · b[n,k]ᵀ`
fn mm_nt(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let br = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for p in 0..k {
                acc += ar[p] * br[p];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// `a[m,k]ᵀ · b[m,n]`, giving `[k,n]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let br = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                row[j] += av * br[j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central differences over every coordinate of every parameter.
    fn check_fd(params: Vec<Tensor>, build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let h = 1e-4;
        let mut tape = Tape::new();
        let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &vars);
        let grads = tape.backward(loss).unwrap();
        let eval = |ps: &[Tensor]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = ps.iter().map(|p| t.param(p.clone())).collect();
            let l = build(&mut t, &vs);
            t.value(l).data()[0]
        };
        for (pi, p) in params.iter().enumerate() {
            let g = grads.get(vars[pi]);
            for c in 0..p.len() {
                let mut plus = params.clone();
                plus[pi].data_mut()[c] += h;
                let mut minus = params.clone();
                minus[pi].data_mut()[c] -= h;
                let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let an = g.data()[c];
                let rel = (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8);
                assert!(rel <= 1e-6, "param {pi} coord {c}: analytic {an} vs fd {fd} (rel {rel:e})");
            }
        }
    }

    #[test]
    fn matmul_identity() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let i = t.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let c = t.matmul(a, i).unwrap();
        assert_eq!(t.value(c).data(), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn gelu_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::scalar(0.0).unwrap());
        let y = t.gelu(x).unwrap();
        assert_eq!(t.value(y).data(), &[0.0]);
    }

    #[test]
    fn xent_uniform_two_classes() {
        let mut t = Tape::new();
        let l = t.constant(Tensor::matrix(1, 2, vec![0.0, 0.0]).unwrap());
        let x = t.softmax_xent(l, &[Some(0)]).unwrap();
        assert!((t.value(x).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn quadratic_gradient() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let sq = t.mul(p, p).unwrap();
        let l = t.sum(sq).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreachable_parameter_gets_exact_zero() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let q = t.param(Tensor::vector(vec![5.0]).unwrap());
        let l = t.sum(q).unwrap();
        let g = t.backward(l).unwrap();
        assert_eq!(g.get(p).data(), &[0.0, 0.0]);
        assert_eq!(g.get(q).data(), &[1.0]);
    }

    #[test]
    fn second_backward_is_state_error() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![1.0]).unwrap());
        let l = t.sum(p).unwrap();
        t.backward(l).unwrap();
        assert!(matches!(t.backward(l), Err(TensorError::State(_))));
        assert!(matches!(t.scale(p, 2.0), Err(TensorError::State(_))));
    }

    #[test]
    fn shape_and_value_errors() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        let b = t.constant(Tensor::matrix(2, 3, vec![0.0; 6]).unwrap());
        assert!(matches!(t.matmul(a, b), Err(TensorError::Dimension(_))));
        assert!(matches!(
            Tensor::vector(vec![1.0, f64::NAN]),
            Err(TensorError::Numeric(_))
        ));
        assert!(matches!(
            Tensor::new(vec![2, 2], vec![0.0; 3]),
            Err(TensorError::Dimension(_))
        ));
        let big = t.constant(Tensor::vector(vec![1e300]).unwrap());
        let sq = t.mul(big, big);
        assert!(matches!(sq, Err(TensorError::Numeric(_))));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut t = Tape::new();
        let p = t.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        assert!(matches!(t.backward(p), Err(TensorError::Dimension(_))));
    }

    #[test]
    fn fd_matmul_and_matmul_t() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let ps = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4, 2]), rand_tensor(&mut rng, &[5, 4])];
        check_fd(ps, |t, v| {
            let ab = t.matmul(v[0], v[1]).unwrap();
            let act = t.matmul_t(v[0], v[2]).unwrap();
            let s1 = t.sum(ab).unwrap();
            let sq = t.mul(act, act).unwrap();
            let s2 = t.sum(sq).unwrap();
            let m = t.mul(s1, s2).unwrap();
            t.sum(m).unwrap()
        });
    }

    #[test]
    fn fd_elementwise_row_and_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let ps = vec![rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[3, 4]), rand_tensor(&mut rng, &[4])];
        check_fd(ps, |t, v| {
            let a = t.add(v[0], v[1]).unwrap();
            let m = t.mul(a, v[1]).unwrap();
            let r = t.add_row(m, v[2]).unwrap();
            let g = t.gelu(r).unwrap();
            let s = t.scale(g, -0.7).unwrap();
            let sq = t.mul(s, s).unwrap();
            t.sum(sq).unwrap()
        });
    }

    #[test]
    fn fd_layer_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ps = vec![rand_tensor(&mut rng, &[3, 5]), rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[5]), rand_tensor(&mut rng, &[3, 5])];
        check_fd(ps, |t, v| {
            let y = t.layer_norm(v[0], v[1], v[2]).unwrap();
            let w = t.mul(y, v[3]).unwrap();
            let w2 = t.mul(w, y).unwrap();
            t.sum(w2).unwrap()
        });
    }

    #[test]
    fn fd_gather_softmax_xent_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ps = vec![rand_tensor(&mut rng, &[6, 4]), rand_tensor(&mut rng, &[4, 6])];
        check_fd(ps, |t, v| {
            let x = t.gather(v[0], &[1, 3, 3, 0]).unwrap();
            let sc = t.matmul_t(x, x).unwrap();
            let p = t.causal_softmax(sc).unwrap();
            let left = t.slice_cols(x, 0, 2).unwrap();
            let right = t.slice_cols(x, 2, 2).unwrap();
            let swapped = t.concat_cols(&[right, left]).unwrap();
            let mixed = t.matmul(p, swapped).unwrap();
            let logits = t.matmul(mixed, v[1]).unwrap();
            let xe = t.softmax_xent(logits, &[None, Some(2), Some(5), Some(0)]).unwrap();
            t.sum(xe).unwrap()
        });
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::new();
        let s = t.constant(Tensor::matrix(2, 2, vec![0.3, 100.0, 0.1, 0.1]).unwrap());
        let p = t.causal_softmax(s).unwrap();
        assert_eq!(t.value(p).data(), &[1.0, 0.0, 0.5, 0.5]);
    }

    #[test]
    fn linearity_of_backward() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let w = rand_tensor(&mut rng, &[4, 3]);
        let x = rand_tensor(&mut rng, &[2, 4]);
        let (a, b) = (0.75, -1.5);
        let run = |ca: f64, cb: f64| {
            let mut t = Tape::new();
            let wv = t.param(w.clone());
            let xv = t.constant(x.clone());
            let y = t.matmul(xv, wv).unwrap();
            let g = t.gelu(y).unwrap();
            let l1 = t.sum(g).unwrap();
            let sq = t.mul(y, y).unwrap();
            let l2 = t.sum(sq).unwrap();
            let s1 = t.scale(l1, ca).unwrap();
            let s2 = t.scale(l2, cb).unwrap();
            let l = t.add(s1, s2).unwrap();
            t.backward(l).unwrap().get(wv)
        };
        let combined = run(a, b);
        let g1 = run(1.0, 0.0);
        let g2 = run(0.0, 1.0);
        for i in 0..combined.len() {
            let expect = a * g1.data()[i] + b * g2.data()[i];
            assert!((combined.data()[i] - expect).abs() <= 1e-12 * expect.abs().max(1.0));
        }
    }

    #[test]
    fn deterministic_bitwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = rand_tensor(&mut rng, &[5, 5]);
        let run = || {
            let mut t = Tape::new();
            let wv = t.param(w.clone());
            let y = t.matmul(wv, wv).unwrap();
            let p = t.causal_softmax(y).unwrap();
            let l = t.sum(p).unwrap();
            let loss = t.value(l).data()[0];
            (loss, t.backward(l).unwrap().get(wv))
        };
        let (l1, g1) = run();
        let (l2, g2) = run();
        assert_eq!(l1.to_bits(), l2.to_bits());
        assert!(g1.data().iter().zip(g2.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
