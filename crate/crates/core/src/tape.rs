//! Reverse-mode autodiff on a Wengert tape.
//!
//! A [`Tape`] is rebuilt for every forward pass: leaves go in first, each op
//! records its inputs and output value, and [`Tape::backward`] walks the node
//! list in reverse, accumulating gradients additively. Gradients flow only
//! into nodes whose subgraph contains a trainable leaf. Calling `backward`
//! twice on the same tape is an error — the graph must be rebuilt.
//!
//! In checked mode every op (and every gradient contribution) is scanned for
//! NaN/Inf and fails fast with [`Error::NonFinite`]. Training loops run
//! unchecked for speed and watch the loss value instead.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Handle to a tape node. Only meaningful for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Hadamard(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, S),
    Silu(Var),
    MulBroadcastRows(Var, Var),
    RmsNorm { x: Var, gain: Var, eps: S },
    Transpose(Var),
    SliceCols { x: Var, start: usize, len: usize },
    ConcatCols(Vec<Var>),
    GatherRows { table: Var, ids: Vec<usize> },
    SoftmaxCausal(Var),
    Sum(Var),
    CrossEntropy { logits: Var, targets: Vec<usize> },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients<S> {
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient of the loss w.r.t. `var`; `None` when no gradient flows there.
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }
}

pub struct Tape<S = f32> {
    nodes: Vec<Node<S>>,
    checked: bool,
    backward_done: bool,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), checked: false, backward_done: false }
    }

    /// Tape that rejects NaN/Inf the moment an op produces one.
    pub fn checked() -> Self {
        Tape { nodes: Vec::new(), checked: true, backward_done: false }
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    /// Scalar value of a single-element node (loss accessors).
    pub fn scalar_value(&self, var: Var) -> Result<S> {
        let t = self.value(var);
        if t.numel() == 1 {
            Ok(t.data()[0])
        } else {
            Err(Error::shape("scalar_value", format!("expected 1 element, got {:?}", t.shape())))
        }
    }

    /// Trainable leaf: gradients will be accumulated for it.
    pub fn param(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, true)
    }

    /// Frozen leaf: participates in the forward pass only.
    pub fn constant(&mut self, value: Tensor<S>) -> Result<Var> {
        self.push("leaf", value, Op::Leaf, false)
    }

    fn check_var(&self, op: &'static str, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Consistency(format!("{op}: var {} does not belong to this tape", v.0)))
        }
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Result<Var> {
        if self.checked && !value.is_finite_all() {
            return Err(Error::NonFinite(op_name.to_string()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    // ─── forward ops ─────────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var("matmul", a)?;
        self.check_var("matmul", b)?;
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs_grad(&[a, b]);
        self.push("matmul", out, Op::MatMul(a, b), rg)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var("hadamard", a)?;
        self.check_var("hadamard", b)?;
        let out = self.value(a).zip_map(self.value(b), "hadamard", |x, y| x * y)?;
        let rg = self.needs_grad(&[a, b]);
        self.push("hadamard", out, Op::Hadamard(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var("add", a)?;
        self.check_var("add", b)?;
        let out = self.value(a).zip_map(self.value(b), "add", |x, y| x + y)?;
        let rg = self.needs_grad(&[a, b]);
        self.push("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var("sub", a)?;
        self.check_var("sub", b)?;
        let out = self.value(a).zip_map(self.value(b), "sub", |x, y| x - y)?;
        let rg = self.needs_grad(&[a, b]);
        self.push("sub", out, Op::Sub(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: S) -> Result<Var> {
        self.check_var("scale", a)?;
        let out = self.value(a).map(|x| x * c);
        let rg = self.needs_grad(&[a]);
        self.push("scale", out, Op::Scale(a, c), rg)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.check_var("silu", a)?;
        let out = self.value(a).map(silu_value);
        let rg = self.needs_grad(&[a]);
        self.push("silu", out, Op::Silu(a), rg)
    }

    /// `out[i,j] = x[i,j] * v[j]` for matrix `x` and row vector `v`.
    pub fn mul_broadcast_rows(&mut self, x: Var, v: Var) -> Result<Var> {
        self.check_var("mul_broadcast_rows", x)?;
        self.check_var("mul_broadcast_rows", v)?;
        let (m, n) = self.value(x).require_matrix("mul_broadcast_rows")?;
        let vn = self.value(v).require_vector("mul_broadcast_rows")?;
        if n != vn {
            return Err(Error::shape(
                "mul_broadcast_rows",
                format!("matrix has {n} columns, vector has {vn}"),
            ));
        }
        let xs = self.value(x).data();
        let vs = self.value(v).data();
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] = xs[i * n + j] * vs[j];
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let rg = self.needs_grad(&[x, v]);
        self.push("mul_broadcast_rows", out, Op::MulBroadcastRows(x, v), rg)
    }

    /// Per-row RMS normalization with learned gain:
    /// `y[i,j] = x[i,j] * g[j] / sqrt(mean_j x[i,j]^2 + eps)`.
    pub fn rmsnorm(&mut self, x: Var, gain: Var, eps: S) -> Result<Var> {
        self.check_var("rmsnorm", x)?;
        self.check_var("rmsnorm", gain)?;
        let (m, n) = self.value(x).require_matrix("rmsnorm")?;
        let gn = self.value(gain).require_vector("rmsnorm")?;
        if n != gn {
            return Err(Error::shape("rmsnorm", format!("x has {n} columns, gain has {gn}")));
        }
        let xs = self.value(x).data();
        let gs = self.value(gain).data();
        let mut data = vec![S::zero(); m * n];
        let inv_n = S::from_f64(1.0 / n as f64);
        for i in 0..m {
            let row = &xs[i * n..(i + 1) * n];
            let mut ms = S::zero();
            for &v in row {
                ms = ms + v * v;
            }
            let r = (ms * inv_n + eps).sqrt();
            for j in 0..n {
                data[i * n + j] = row[j] * gs[j] / r;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let rg = self.needs_grad(&[x, gain]);
        self.push("rmsnorm", out, Op::RmsNorm { x, gain, eps }, rg)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check_var("transpose", a)?;
        let out = self.value(a).transposed()?;
        let rg = self.needs_grad(&[a]);
        self.push("transpose", out, Op::Transpose(a), rg)
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check_var("slice_cols", x)?;
        let (m, n) = self.value(x).require_matrix("slice_cols")?;
        if len == 0 || start + len > n {
            return Err(Error::shape(
                "slice_cols",
                format!("columns [{start}, {}) out of range for width {n}", start + len),
            ));
        }
        let xs = self.value(x).data();
        let mut data = vec![S::zero(); m * len];
        for i in 0..m {
            data[i * len..(i + 1) * len].copy_from_slice(&xs[i * n + start..i * n + start + len]);
        }
        let out = Tensor::matrix(m, len, data)?;
        let rg = self.needs_grad(&[x]);
        self.push("slice_cols", out, Op::SliceCols { x, start, len }, rg)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat_cols", "no inputs".to_string()));
        }
        for &p in parts {
            self.check_var("concat_cols", p)?;
        }
        let (m, _) = self.value(parts[0]).require_matrix("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        for &p in parts {
            let (pm, pn) = self.value(p).require_matrix("concat_cols")?;
            if pm != m {
                return Err(Error::shape(
                    "concat_cols",
                    format!("row counts differ: {m} vs {pm}"),
                ));
            }
            widths.push(pn);
            total += pn;
        }
        let mut data = vec![S::zero(); m * total];
        let mut off = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let ps = self.value(p).data();
            for i in 0..m {
                data[i * total + off..i * total + off + w].copy_from_slice(&ps[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let out = Tensor::matrix(m, total, data)?;
        let rg = self.needs_grad(parts);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), rg)
    }

    /// Embedding lookup: stacks `table[ids[i], :]` as row `i`. Duplicate ids
    /// accumulate gradient additively.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_var("gather_rows", table)?;
        let (v, d) = self.value(table).require_matrix("gather_rows")?;
        if ids.is_empty() {
            return Err(Error::shape("gather_rows", "empty id list".to_string()));
        }
        if let Some(&bad) = ids.iter().find(|&&id| id >= v) {
            return Err(Error::shape("gather_rows", format!("id {bad} out of range for {v} rows")));
        }
        let ts = self.value(table).data();
        let mut data = vec![S::zero(); ids.len() * d];
        for (i, &id) in ids.iter().enumerate() {
            data[i * d..(i + 1) * d].copy_from_slice(&ts[id * d..(id + 1) * d]);
        }
        let out = Tensor::matrix(ids.len(), d, data)?;
        let rg = self.needs_grad(&[table]);
        self.push("gather_rows", out, Op::GatherRows { table, ids: ids.to_vec() }, rg)
    }

    /// Row-wise softmax over a square score matrix where row `i` attends to
    /// columns `0..=i`; masked positions are exactly zero in the output.
    pub fn softmax_causal(&mut self, scores: Var) -> Result<Var> {
        self.check_var("softmax_causal", scores)?;
        let (m, n) = self.value(scores).require_matrix("softmax_causal")?;
        if m != n {
            return Err(Error::shape("softmax_causal", format!("expected square matrix, got [{m}, {n}]")));
        }
        let ss = self.value(scores).data();
        let mut data = vec![S::zero(); m * n];
        for i in 0..m {
            let row = &ss[i * n..i * n + i + 1];
            let mut mx = row[0];
            for &v in row {
                if v > mx {
                    mx = v;
                }
            }
            let mut denom = S::zero();
            for &v in row {
                denom = denom + (v - mx).exp();
            }
            for j in 0..=i {
                data[i * n + j] = (row[j] - mx).exp() / denom;
            }
        }
        let out = Tensor::matrix(m, n, data)?;
        let rg = self.needs_grad(&[scores]);
        self.push("softmax_causal", out, Op::SoftmaxCausal(scores), rg)
    }

    /// Sum of all elements; returns a single-element tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_var("sum", x)?;
        let mut acc = S::zero();
        for &v in self.value(x).data() {
            acc = acc + v;
        }
        let out = Tensor::vector(vec![acc]);
        let rg = self.needs_grad(&[x]);
        self.push("sum", out, Op::Sum(x), rg)
    }

    /// Mean token-level cross-entropy between `logits` (`[T, V]`, raw scores)
    /// and integer targets (`len T`, each `< V`). Log-sum-exp is stabilized
    /// by per-row max subtraction.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_var("cross_entropy", logits)?;
        let (t, v) = self.value(logits).require_matrix("cross_entropy")?;
        if targets.len() != t {
            return Err(Error::shape(
                "cross_entropy",
                format!("{t} logit rows vs {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&id| id >= v) {
            return Err(Error::shape("cross_entropy", format!("target {bad} out of range for {v} classes")));
        }
        let zs = self.value(logits).data();
        let mut acc = 0.0f64;
        for (i, &target) in targets.iter().enumerate() {
            let row = &zs[i * v..(i + 1) * v];
            let mut mx = row[0];
            for &z in row {
                if z > mx {
                    mx = z;
                }
            }
            let mut denom = S::zero();
            for &z in row {
                denom = denom + (z - mx).exp();
            }
            acc += denom.as_f64().ln() - (row[target] - mx).as_f64();
        }
        let loss = S::from_f64(acc / t as f64);
        let out = Tensor::vector(vec![loss]);
        let rg = self.needs_grad(&[logits]);
        self.push("cross_entropy", out, Op::CrossEntropy { logits, targets: targets.to_vec() }, rg)
    }

    // ─── backward ────────────────────────────────────────────────────────

    /// Reverse pass from `loss` (must be a single-element node). Returns the
    /// accumulated gradients; a second call without rebuilding the tape is an
    /// error.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<S>> {
        self.check_var("backward", loss)?;
        if self.backward_done {
            return Err(Error::Consistency(
                "backward called twice on the same tape; rebuild the forward pass first".to_string(),
            ));
        }
        self.backward_done = true;
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be a single element, got {:?}", self.value(loss).shape()),
            ));
        }

        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape().to_vec(), S::one()));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accum(&self, grads: &mut [Option<Tensor<S>>], var: Var, contrib: Tensor<S>) -> Result<()> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        if self.checked && !contrib.is_finite_all() {
            return Err(Error::NonFinite("backward".to_string()));
        }
        match &mut grads[var.0] {
            Some(existing) => {
                let summed = existing.zip_map(&contrib, "grad_accum", |a, b| a + b)?;
                *existing = summed;
            }
            slot @ None => *slot = Some(contrib),
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) -> Result<()> {
        match &self.nodes[idx].op {
            Op::Leaf => Ok(()),
            Op::MatMul(a, b) => {
                // out = A·B  =>  dA = G·Bᵀ, dB = Aᵀ·G
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let bt = self.value(b).transposed()?;
                    self.accum(grads, a, g.matmul(&bt)?)?;
                }
                if self.nodes[b.0].requires_grad {
                    let at = self.value(a).transposed()?;
                    self.accum(grads, b, at.matmul(g)?)?;
                }
                Ok(())
            }
            Op::Hadamard(a, b) => {
                let (a, b) = (*a, *b);
                if self.nodes[a.0].requires_grad {
                    let da = g.zip_map(self.value(b), "hadamard_bwd", |gv, bv| gv * bv)?;
                    self.accum(grads, a, da)?;
                }
                if self.nodes[b.0].requires_grad {
                    let db = g.zip_map(self.value(a), "hadamard_bwd", |gv, av| gv * av)?;
                    self.accum(grads, b, db)?;
                }
                Ok(())
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(grads, a, g.clone())?;
                self.accum(grads, b, g.clone())?;
                Ok(())
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accum(grads, a, g.clone())?;
                self.accum(grads, b, g.map(|v| -v))?;
                Ok(())
            }
            Op::Scale(a, c) => {
                let (a, c) = (*a, *c);
                self.accum(grads, a, g.map(|v| v * c))?;
                Ok(())
            }
            Op::Silu(a) => {
                let a = *a;
                let dx = g.zip_map(self.value(a), "silu_bwd", |gv, xv| gv * silu_derivative(xv))?;
                self.accum(grads, a, dx)?;
                Ok(())
            }
            Op::MulBroadcastRows(x, v) => {
                let (x, v) = (*x, *v);
                let (m, n) = self.value(x).require_matrix("mul_broadcast_rows_bwd")?;
                let xs = self.value(x).data();
                let vs = self.value(v).data();
                let gs = g.data();
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![S::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            dx[i * n + j] = gs[i * n + j] * vs[j];
                        }
                    }
                    self.accum(grads, x, Tensor::matrix(m, n, dx)?)?;
                }
                if self.nodes[v.0].requires_grad {
                    let mut dv = vec![S::zero(); n];
                    for i in 0..m {
                        for j in 0..n {
                            dv[j] = dv[j] + gs[i * n + j] * xs[i * n + j];
                        }
                    }
                    self.accum(grads, v, Tensor::vector(dv))?;
                }
                Ok(())
            }
            Op::RmsNorm { x, gain, eps } => {
                let (x, gain, eps) = (*x, *gain, *eps);
                let (m, n) = self.value(x).require_matrix("rmsnorm_bwd")?;
                let xs = self.value(x).data();
                let gns = self.value(gain).data();
                let gs = g.data();
                let inv_n = S::from_f64(1.0 / n as f64);
                let mut dx = vec![S::zero(); m * n];
                let mut dgain = vec![S::zero(); n];
                for i in 0..m {
                    let row = &xs[i * n..(i + 1) * n];
                    let grow = &gs[i * n..(i + 1) * n];
                    let mut ms = S::zero();
                    for &v in row {
                        ms = ms + v * v;
                    }
                    let r = (ms * inv_n + eps).sqrt();
                    // dot = Σ_k G[i,k] · g[k] · x[i,k]
                    let mut dot = S::zero();
                    for k in 0..n {
                        dot = dot + grow[k] * gns[k] * row[k];
                    }
                    let r3 = r * r * r;
                    for j in 0..n {
                        dx[i * n + j] = grow[j] * gns[j] / r - row[j] * inv_n * dot / r3;
                        dgain[j] = dgain[j] + grow[j] * row[j] / r;
                    }
                }
                if self.nodes[x.0].requires_grad {
                    self.accum(grads, x, Tensor::matrix(m, n, dx)?)?;
                }
                if self.nodes[gain.0].requires_grad {
                    self.accum(grads, gain, Tensor::vector(dgain))?;
                }
                Ok(())
            }
            Op::Transpose(a) => {
                let a = *a;
                self.accum(grads, a, g.transposed()?)?;
                Ok(())
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let (m, n) = self.value(x).require_matrix("slice_cols_bwd")?;
                let gs = g.data();
                let mut dx = vec![S::zero(); m * n];
                for i in 0..m {
                    dx[i * n + start..i * n + start + len].copy_from_slice(&gs[i * len..(i + 1) * len]);
                }
                self.accum(grads, x, Tensor::matrix(m, n, dx)?)?;
                Ok(())
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let (m, total) = g.require_matrix("concat_cols_bwd")?;
                let gs = g.data();
                let mut off = 0usize;
                for p in parts {
                    let (_, w) = self.value(p).require_matrix("concat_cols_bwd")?;
                    if self.nodes[p.0].requires_grad {
                        let mut dp = vec![S::zero(); m * w];
                        for i in 0..m {
                            dp[i * w..(i + 1) * w]
                                .copy_from_slice(&gs[i * total + off..i * total + off + w]);
                        }
                        self.accum(grads, p, Tensor::matrix(m, w, dp)?)?;
                    }
                    off += w;
                }
                Ok(())
            }
            Op::GatherRows { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let (v, d) = self.value(table).require_matrix("gather_rows_bwd")?;
                let gs = g.data();
                let mut dt = vec![S::zero(); v * d];
                for (i, id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] = dt[id * d + j] + gs[i * d + j];
                    }
                }
                self.accum(grads, table, Tensor::matrix(v, d, dt)?)?;
                Ok(())
            }
            Op::SoftmaxCausal(s) => {
                let s = *s;
                let p = self.value(Var(idx)).clone();
                let (m, n) = p.require_matrix("softmax_causal_bwd")?;
                let ps = p.data();
                let gs = g.data();
                let mut ds = vec![S::zero(); m * n];
                for i in 0..m {
                    // dS[i,j] = P[i,j] · (G[i,j] − Σ_{k≤i} G[i,k]·P[i,k])
                    let mut dot = S::zero();
                    for k in 0..=i {
                        dot = dot + gs[i * n + k] * ps[i * n + k];
                    }
                    for j in 0..=i {
                        ds[i * n + j] = ps[i * n + j] * (gs[i * n + j] - dot);
                    }
                }
                self.accum(grads, s, Tensor::matrix(m, n, ds)?)?;
                Ok(())
            }
            Op::Sum(x) => {
                let x = *x;
                let gv = g.data()[0];
                let dx = Tensor::filled(self.value(x).shape().to_vec(), gv);
                self.accum(grads, x, dx)?;
                Ok(())
            }
            Op::CrossEntropy { logits, targets } => {
                let (logits, targets) = (*logits, targets.clone());
                let (t, v) = self.value(logits).require_matrix("cross_entropy_bwd")?;
                let zs = self.value(logits).data();
                let gv = g.data()[0];
                let scale = gv * S::from_f64(1.0 / t as f64);
                let mut dz = vec![S::zero(); t * v];
                for (i, &target) in targets.iter().enumerate() {
                    let row = &zs[i * v..(i + 1) * v];
                    let mut mx = row[0];
                    for &z in row {
                        if z > mx {
                            mx = z;
                        }
                    }
                    let mut denom = S::zero();
                    for &z in row {
                        denom = denom + (z - mx).exp();
                    }
                    for j in 0..v {
                        let p = (row[j] - mx).exp() / denom;
                        let indicator = if j == target { S::one() } else { S::zero() };
                        dz[i * v + j] = (p - indicator) * scale;
                    }
                }
                self.accum(grads, logits, Tensor::matrix(t, v, dz)?)?;
                Ok(())
            }
        }
    }
}

fn silu_value<S: Scalar>(x: S) -> S {
    x * sigmoid(x)
}

fn silu_derivative<S: Scalar>(x: S) -> S {
    let s = sigmoid(x);
    s * (S::one() + x * (S::one() - s))
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}
