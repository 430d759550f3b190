//! Define-by-run reverse-mode differentiation.
//!
//! Every operation appends one node to the tape. Nodes only reference
//! earlier nodes, so the tape order is already a topological order and the
//! backward pass is a single reverse sweep.

use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::tensor::{
    dot, gelu, gelu_grad, group_mean_into, matmul_at_into, matmul_bt_into, matmul_into,
    mean_inv_std, softmax_in_place, Tensor,
};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    AddTiled(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        probs: Vec<f64>,
    },
    GroupMean {
        x: Var,
        group: usize,
    },
    RepeatRows {
        x: Var,
        times: usize,
    },
    ConcatRows(Vec<Var>),
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    Transpose(Var),
    CrossEntropyRows {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        probs: Vec<f64>,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of a forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::contract(format!(
            "{op} expects a matrix, got shape {:?}",
            t.shape()
        )));
    }
    Ok((t.shape()[0], t.shape()[1]))
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.values()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value from {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant. Gradients flow into it only when the tensor
    /// was flagged with `requires_grad`.
    pub fn input(&mut self, t: Tensor) -> Var {
        let needs = t.requires_grad();
        self.push(t, Op::Input, needs)
    }

    /// Records a parameter. Repeated calls for one parameter return the same
    /// node, so every use of a shared weight accumulates into one gradient.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = Tensor::new(store.get(id).tensor.shape().to_vec(), store.get(id).tensor.values().to_vec())
            .expect("parameter tensors are well formed");
        let v = self.push(t, Op::Param, true);
        self.params.insert(id, v);
        v
    }

    /// The node recorded for a parameter, if it was used in this pass.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.params.get(&id).copied()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix(self.value(a), "matmul")?;
        let (k2, n) = matrix(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err("matmul", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.val(a), self.val(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// `a · bᵀ` for `a: m×k`, `b: n×k`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix(self.value(a), "matmul_bt")?;
        let (n, k2) = matrix(self.value(b), "matmul_bt")?;
        if k != k2 {
            return Err(shape_err("matmul_bt", self.value(a), self.value(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_bt_into(self.val(a), self.val(b), &mut out, m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_err("add", self.value(a), self.value(b)));
        }
        let out: Vec<f64> = self.val(a).iter().zip(self.val(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), out)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add(a, b), needs))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, n) = matrix(self.value(x), "add_row_bias")?;
        if self.value(bias).len() != n {
            return Err(shape_err("add_row_bias", self.value(x), self.value(bias)));
        }
        let b = self.val(bias);
        let out: Vec<f64> = self
            .val(x)
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(r, c)| r + c))
            .collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(bias);
        Ok(self.push(t, Op::AddRowBias(x, bias), needs))
    }

    /// Adds a `T×d` block to each consecutive `T`-row block of a `(B·T)×d` matrix.
    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (rows, cols) = matrix(self.value(x), "add_tiled")?;
        let (trows, tcols) = matrix(self.value(tile), "add_tiled")?;
        if tcols != cols || rows % trows != 0 {
            return Err(shape_err("add_tiled", self.value(x), self.value(tile)));
        }
        let tv = self.val(tile);
        let out: Vec<f64> = self
            .val(x)
            .chunks(trows * cols)
            .flat_map(|blk| blk.iter().zip(tv).map(|(a, b)| a + b))
            .collect();
        let t = Tensor::new(vec![rows, cols], out)?;
        let needs = self.needs(x) || self.needs(tile);
        Ok(self.push(t, Op::AddTiled(x, tile), needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out: Vec<f64> = self.val(x).iter().map(|v| v * c).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Scale(x, c), needs))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out: Vec<f64> = self.val(x).iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Gelu(x), needs))
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(v) = self.val(x).iter().find(|v| **v <= 0.0) {
            return Err(Error::contract(format!("log of non-positive value {v}")));
        }
        let out: Vec<f64> = self.val(x).iter().map(|v| v.ln()).collect();
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Log(x), needs))
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (rows, cols) = self.value(x).as_matrix();
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(shape_err("layer_norm", self.value(x), self.value(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        {
            let xs = self.val(x);
            let g = self.val(gamma);
            let b = self.val(beta);
            for r in 0..rows {
                let row = &xs[r * cols..(r + 1) * cols];
                let (mean, is) = mean_inv_std(row, eps);
                inv_std[r] = is;
                for c in 0..cols {
                    let h = (row[c] - mean) * is;
                    xhat[r * cols + c] = h;
                    out[r * cols + c] = g[c] * h + b[c];
                }
            }
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (_, cols) = self.value(x).as_matrix();
        let mut out = self.val(x).to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::SoftmaxRows(x), needs))
    }

    /// Scaled dot-product attention over `groups` independent blocks.
    ///
    /// `q` is `(groups·Lq)×d` and `k`, `v` are `(groups·Lk)×d`; the feature
    /// axis splits into `heads` contiguous slices. Each query row attends
    /// only to the key/value rows of its own group, so a block of `Lq`
    /// queries is the same as `Lq` independent single-query attentions.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, groups: usize) -> Result<Var> {
        let (qr, d) = matrix(self.value(q), "attention")?;
        let (kr, dk) = matrix(self.value(k), "attention")?;
        if self.value(v).shape() != self.value(k).shape() || dk != d {
            return Err(shape_err("attention", self.value(q), self.value(k)));
        }
        if heads == 0 || d % heads != 0 || groups == 0 || qr % groups != 0 || kr % groups != 0 {
            return Err(Error::contract(format!(
                "attention: d={d} heads={heads} groups={groups} rows q={qr} kv={kr}"
            )));
        }
        let lq = qr / groups;
        let lk = kr / groups;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut probs = vec![0.0; groups * heads * lq * lk];
        let mut out = vec![0.0; qr * d];
        {
            let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
            for g in 0..groups {
                for h in 0..heads {
                    let off = h * dh;
                    for i in 0..lq {
                        let qi = (g * lq + i) * d + off;
                        let p = &mut probs[((g * heads + h) * lq + i) * lk..][..lk];
                        for (j, pj) in p.iter_mut().enumerate() {
                            let kj = (g * lk + j) * d + off;
                            *pj = dot(&qv[qi..qi + dh], &kv[kj..kj + dh]) * scale;
                        }
                        softmax_in_place(p);
                        let o = &mut out[qi..qi + dh];
                        for (j, &pj) in p.iter().enumerate() {
                            let vj = (g * lk + j) * d + off;
                            for (oc, vc) in o.iter_mut().zip(&vv[vj..vj + dh]) {
                                *oc += pj * vc;
                            }
                        }
                    }
                }
            }
        }
        let t = Tensor::new(vec![qr, d], out)?;
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        Ok(self.push(
            t,
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            },
            needs,
        ))
    }

    /// Attention weights recorded by an [`Tape::attention`] node, laid out
    /// as `[group][head][query][key]`.
    pub fn attention_weights(&self, node: Var) -> Option<&[f64]> {
        match &self.nodes[node.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over each consecutive block of `group` rows: `(B·group)×d → B×d`.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        if group == 0 {
            return Err(Error::Empty("group_mean"));
        }
        let (rows, cols) = matrix(self.value(x), "group_mean")?;
        if rows % group != 0 {
            return Err(Error::contract(format!(
                "group_mean: {rows} rows not divisible into groups of {group}"
            )));
        }
        let b = rows / group;
        let mut out = vec![0.0; b * cols];
        let xs = self.val(x);
        for (i, o) in out.chunks_mut(cols).enumerate() {
            group_mean_into(&xs[i * group * cols..(i + 1) * group * cols], o, group, cols);
        }
        let t = Tensor::new(vec![b, cols], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::GroupMean { x, group }, needs))
    }

    /// Repeats every row `times` times consecutively: `B×d → (B·times)×d`.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Empty("repeat_rows"));
        }
        let (rows, cols) = matrix(self.value(x), "repeat_rows")?;
        let mut out = Vec::with_capacity(rows * cols * times);
        for row in self.val(x).chunks(cols) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let t = Tensor::new(vec![rows * times, cols], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::RepeatRows { x, times }, needs))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let (_, cols) = matrix(self.value(first), "concat_rows")?;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = matrix(self.value(p), "concat_rows")?;
            if c != cols {
                return Err(shape_err("concat_rows", self.value(first), self.value(p)));
            }
            rows += r;
            out.extend_from_slice(self.val(p));
        }
        let t = Tensor::new(vec![rows, cols], out)?;
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), needs))
    }

    /// Scales every row to unit Euclidean length; rows with norm below
    /// `eps` are divided by `eps` instead.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (_, cols) = matrix(self.value(x), "normalize_rows")?;
        let mut norms = Vec::new();
        let mut out = Vec::with_capacity(self.value(x).len());
        for row in self.val(x).chunks(cols) {
            let n = dot(row, row).sqrt().max(eps);
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let t = Tensor::new(self.value(x).shape().to_vec(), out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::NormalizeRows { x, norms }, needs))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = matrix(self.value(x), "transpose")?;
        let xs = self.val(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = xs[i * c + j];
            }
        }
        let t = Tensor::new(vec![c, r], out)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Transpose(x), needs))
    }

    /// Mean over rows of `-logit[r, target_r] + log Σ_{c ∈ mask_r} exp(logit[r, c])`.
    ///
    /// `mask` is row-major over the logits and selects the denominator
    /// entries of each row. A row with an empty denominator is an error.
    pub fn cross_entropy_rows(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (rows, cols) = matrix(self.value(logits), "cross_entropy_rows")?;
        if targets.len() != rows || mask.len() != rows * cols {
            return Err(Error::contract(format!(
                "cross_entropy_rows: {rows}×{cols} logits with {} targets and {} mask entries",
                targets.len(),
                mask.len()
            )));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= cols) {
            return Err(Error::contract(format!("target column {t} out of range {cols}")));
        }
        let mut probs = vec![0.0; rows * cols];
        let mut total = 0.0;
        let lv = self.val(logits);
        for r in 0..rows {
            let row = &lv[r * cols..(r + 1) * cols];
            let m = &mask[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(v, _)| *v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::contract(format!(
                    "row {r} has an empty denominator set"
                )));
            }
            let mut sum = 0.0;
            for c in 0..cols {
                if m[c] {
                    let e = (row[c] - max).exp();
                    probs[r * cols + c] = e;
                    sum += e;
                }
            }
            for p in &mut probs[r * cols..(r + 1) * cols] {
                *p /= sum;
            }
            total += max + sum.ln() - row[targets[r]];
        }
        let t = Tensor::scalar(total / rows as f64);
        let needs = self.needs(logits);
        Ok(self.push(
            t,
            Op::CrossEntropyRows {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                probs,
            },
            needs,
        ))
    }

    /// `Σ w_i · x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0;
        for &(v, w) in terms {
            if self.value(v).len() != 1 {
                return Err(Error::contract("weighted_sum expects scalar terms"));
            }
            total += w * self.val(v)[0];
        }
        let needs = terms.iter().any(|&(v, _)| self.needs(v));
        Ok(self.push(Tensor::scalar(total), Op::WeightedSum(terms.to_vec()), needs))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.needs(v) {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).as_matrix();
                let n = self.value(*b).shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_bt_into(g, self.val(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_at_into(self.val(*a), g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = self.value(*a).as_matrix();
                let n = self.value(*b).shape()[0];
                if let Some(ga) = self.slot(grads, *a) {
                    matmul_into(g, self.val(*b), ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    matmul_at_into(g, self.val(*a), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.slot(grads, v) {
                        add_into(gv, g);
                    }
                }
            }
            Op::AddRowBias(x, b) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    let n = gb.len();
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::AddTiled(x, tile) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                if let Some(gt) = self.slot(grads, *tile) {
                    let n = gt.len();
                    for blk in g.chunks(n) {
                        add_into(gt, blk);
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (o, gi) in gx.iter_mut().zip(g) {
                        *o += c * gi;
                    }
                }
            }
            Op::Gelu(x) => {
                let xs = self.val(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xs) {
                        *o += gi * gelu_grad(*xi);
                    }
                }
            }
            Op::Log(x) => {
                let xs = self.val(*x);
                if let Some(gx) = self.slot(grads, *x) {
                    for ((o, gi), xi) in gx.iter_mut().zip(g).zip(xs) {
                        *o += gi / xi;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let cols = self.value(*gamma).len();
                let gm = self.val(*gamma);
                if let Some(gg) = self.slot(grads, *gamma) {
                    for (row_g, row_h) in g.chunks(cols).zip(xhat.chunks(cols)) {
                        for c in 0..cols {
                            gg[c] += row_g[c] * row_h[c];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *beta) {
                    for row_g in g.chunks(cols) {
                        add_into(gb, row_g);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = cols as f64;
                    for (r, (row_g, row_h)) in g.chunks(cols).zip(xhat.chunks(cols)).enumerate() {
                        let mut sum_d = 0.0;
                        let mut sum_dh = 0.0;
                        for c in 0..cols {
                            let d = row_g[c] * gm[c];
                            sum_d += d;
                            sum_dh += d * row_h[c];
                        }
                        let out = &mut gx[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            let d = row_g[c] * gm[c];
                            out[c] += inv_std[r] * (d - sum_d / n - row_h[c] * sum_dh / n);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = node.value.values();
                let (_, cols) = node.value.as_matrix();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((yr, gr), or) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let s = dot(yr, gr);
                        for c in 0..cols {
                            or[c] += yr[c] * (gr[c] - s);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                groups,
                probs,
            } => self.backprop_attention(*q, *k, *v, *heads, *groups, probs, g, grads),
            Op::GroupMean { x, group } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = node.value.as_matrix().1;
                    let inv = 1.0 / *group as f64;
                    for (i, gr) in g.chunks(cols).enumerate() {
                        for r in 0..*group {
                            let o = &mut gx[(i * group + r) * cols..(i * group + r + 1) * cols];
                            for (oc, gc) in o.iter_mut().zip(gr) {
                                *oc += gc * inv;
                            }
                        }
                    }
                }
            }
            Op::RepeatRows { x, times } => {
                if let Some(gx) = self.slot(grads, *x) {
                    let cols = node.value.as_matrix().1;
                    for (i, gr) in g.chunks(cols).enumerate() {
                        let src = i / times;
                        add_into(&mut gx[src * cols..(src + 1) * cols], gr);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.slot(grads, p) {
                        add_into(gp, &g[off..off + n]);
                    }
                    off += n;
                }
            }
            Op::NormalizeRows { x, norms } => {
                let y = node.value.values();
                let cols = node.value.as_matrix().1;
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, norm) in norms.iter().enumerate() {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let o = &mut gx[r * cols..(r + 1) * cols];
                        let xs_norm = dot(&self.val(*x)[r * cols..(r + 1) * cols], &self.val(*x)[r * cols..(r + 1) * cols]).sqrt();
                        if xs_norm < *norm {
                            // clamped row: y = x / eps
                            for (oc, gc) in o.iter_mut().zip(gr) {
                                *oc += gc / norm;
                            }
                        } else {
                            let s = dot(yr, gr);
                            for c in 0..cols {
                                o[c] += (gr[c] - yr[c] * s) / norm;
                            }
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let (r, c) = self.value(*x).as_matrix();
                if let Some(gx) = self.slot(grads, *x) {
                    for i in 0..r {
                        for j in 0..c {
                            gx[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::CrossEntropyRows {
                logits,
                targets,
                mask,
                probs,
            } => {
                let (rows, cols) = self.value(*logits).as_matrix();
                if let Some(gl) = self.slot(grads, *logits) {
                    let w = g[0] / rows as f64;
                    for r in 0..rows {
                        for c in 0..cols {
                            if mask[r * cols + c] {
                                gl[r * cols + c] += w * probs[r * cols + c];
                            }
                        }
                        gl[r * cols + targets[r]] -= w;
                    }
                }
            }
            Op::WeightedSum(terms) => {
                // a zero weight cuts the path, so parameters reachable only
                // through it end up with no gradient at all
                for &(v, w) in terms.iter().filter(|(_, w)| *w != 0.0) {
                    if let Some(gv) = self.slot(grads, v) {
                        gv[0] += w * g[0];
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn backprop_attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        groups: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let (qr, d) = self.value(q).as_matrix();
        let kr = self.value(k).as_matrix().0;
        let (lq, lk, dh) = (qr / groups, kr / groups, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.val(q), self.val(k), self.val(v));
        let mut gq = vec![0.0; qr * d];
        let mut gk = vec![0.0; kr * d];
        let mut gv = vec![0.0; kr * d];
        let mut dp = vec![0.0; lk];
        for gi in 0..groups {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..lq {
                    let qi = (gi * lq + i) * d + off;
                    let p = &probs[((gi * heads + h) * lq + i) * lk..][..lk];
                    let go = &g[qi..qi + dh];
                    for j in 0..lk {
                        let vj = (gi * lk + j) * d + off;
                        dp[j] = dot(go, &vv[vj..vj + dh]);
                        for (o, gc) in gv[vj..vj + dh].iter_mut().zip(go) {
                            *o += p[j] * gc;
                        }
                    }
                    let s = dot(p, &dp);
                    for j in 0..lk {
                        let ds = p[j] * (dp[j] - s) * scale;
                        let kj = (gi * lk + j) * d + off;
                        for c in 0..dh {
                            gq[qi + c] += ds * kv[kj + c];
                            gk[kj + c] += ds * qv[qi + c];
                        }
                    }
                }
            }
        }
        for (var, part) in [(q, gq), (k, gk), (v, gv)] {
            if self.needs(var) {
                let n = part.len();
                add_into(grads[var.0].get_or_insert_with(|| vec![0.0; n]), &part);
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    params: Vec<(ParamId, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded node; `None` when
    /// the node is unreachable from the loss or does not require gradients.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameters recorded on the tape with their gradients, in id order.
    pub fn params(&self) -> Vec<(ParamId, Option<&[f64]>)> {
        let mut out: Vec<_> = self.params.iter().map(|&(id, v)| (id, self.wrt(v))).collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap()
            .with_requires_grad(true)
    }

    /// Builds a scalar from the inputs, then compares every input gradient
    /// against central differences.
    fn check<F>(inputs: Vec<Tensor>, build: F) -> f64
    where
        F: Fn(&mut Tape, &[Var]) -> Var,
    {
        let eval = |ins: &[Tensor]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = ins.iter().cloned().map(|t| tape.input(t)).collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = eval(&inputs);
        let grads = tape.backward(out).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for (i, t) in inputs.iter().enumerate() {
            let analytic = grads.wrt(vars[i]).map(<[f64]>::to_vec).unwrap_or(vec![0.0; t.len()]);
            for j in 0..t.len() {
                let mut plus = inputs.clone();
                plus[i].values_mut()[j] += h;
                let mut minus = inputs.clone();
                minus[i].values_mut()[j] -= h;
                let (tp, _, op) = eval(&plus);
                let (tm, _, om) = eval(&minus);
                let fd = (tp.value(op).values()[0] - tm.value(om).values()[0]) / (2.0 * h);
                let err = (fd - analytic[j]).abs() / fd.abs().max(analytic[j].abs()).max(1e-6);
                worst = worst.max(err);
            }
        }
        worst
    }

    /// Random bilinear read-out `rᵀ X w` so every coordinate of `x` matters.
    fn weights(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let (rows, cols) = tape.value(x).as_matrix();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = Tensor::new(vec![cols, 1], (0..cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let r = Tensor::new(vec![1, rows], (0..rows).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let w = tape.input(w);
        let r = tape.input(r);
        let col = tape.matmul(x, w).unwrap();
        tape.matmul(r, col).unwrap()
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::new(vec![1, 1], vec![3.0]).unwrap().with_requires_grad(true));
        let y = tape.matmul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[6.0]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn finite_differences_over_seeds() {
        for seed in 0..10u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = rand_tensor(&[3, 4], &mut rng);
            let b = rand_tensor(&[4, 5], &mut rng);
            let bias = rand_tensor(&[5], &mut rng);
            let err = check(vec![a, b, bias], |t, v| {
                let m = t.matmul(v[0], v[1]).unwrap();
                let m = t.add_row_bias(m, v[2]).unwrap();
                let m = t.gelu(m).unwrap();
                weights(t, m, seed)
            });
            assert!(err < 1e-4, "matmul/bias/gelu seed {seed}: {err}");

            let x = rand_tensor(&[4, 6], &mut rng);
            let gamma = rand_tensor(&[6], &mut rng);
            let beta = rand_tensor(&[6], &mut rng);
            let err = check(vec![x, gamma, beta], |t, v| {
                let y = t.layer_norm(v[0], v[1], v[2], 1e-6).unwrap();
                weights(t, y, seed + 100)
            });
            assert!(err < 1e-4, "layer_norm seed {seed}: {err}");

            let x = rand_tensor(&[3, 5], &mut rng);
            let err = check(vec![x], |t, v| {
                let y = t.softmax_rows(v[0]).unwrap();
                weights(t, y, seed + 200)
            });
            assert!(err < 1e-4, "softmax seed {seed}: {err}");

            let q = rand_tensor(&[2 * 3, 8], &mut rng);
            let k = rand_tensor(&[2 * 4, 8], &mut rng);
            let vv = rand_tensor(&[2 * 4, 8], &mut rng);
            let err = check(vec![q, k, vv], |t, v| {
                let y = t.attention(v[0], v[1], v[2], 2, 2).unwrap();
                weights(t, y, seed + 300)
            });
            assert!(err < 1e-4, "attention seed {seed}: {err}");

            let x = rand_tensor(&[4, 3], &mut rng);
            let tile = rand_tensor(&[2, 3], &mut rng);
            let err = check(vec![x, tile], |t, v| {
                let y = t.add_tiled(v[0], v[1]).unwrap();
                let m = t.group_mean(y, 2).unwrap();
                let r = t.repeat_rows(m, 3).unwrap();
                let c = t.concat_rows(&[r, v[0]]).unwrap();
                let tr = t.transpose(c).unwrap();
                let s = t.scale(tr, 0.7).unwrap();
                weights(t, s, seed + 400)
            });
            assert!(err < 1e-4, "structural ops seed {seed}: {err}");

            let a = rand_tensor(&[3, 4], &mut rng);
            let b = rand_tensor(&[5, 4], &mut rng);
            let err = check(vec![a, b], |t, v| {
                let na = t.normalize_rows(v[0], 1e-12).unwrap();
                let nb = t.normalize_rows(v[1], 1e-12).unwrap();
                let l = t.matmul_bt(na, nb).unwrap();
                let l = t.scale(l, 1.0 / 0.07).unwrap();
                let mask = vec![true; 15];
                let mut mask2 = mask.clone();
                mask2[1] = false;
                let c1 = t.cross_entropy_rows(l, &[0, 1, 2], &mask).unwrap();
                let c2 = t.cross_entropy_rows(l, &[0, 1, 2], &mask2).unwrap();
                t.weighted_sum(&[(c1, 0.5), (c2, 0.25)]).unwrap()
            });
            assert!(err < 1e-4, "contrastive ops seed {seed}: {err}");

            let s = Tensor::new(vec![1, 4], (0..4).map(|_| rng.gen_range(0.5..3.0)).collect())
                .unwrap()
                .with_requires_grad(true);
            let err = check(vec![s], |t, v| {
                let l = t.log(v[0]).unwrap();
                t.cross_entropy_rows(l, &[0], &[true; 4]).unwrap()
            });
            assert!(err < 1e-4, "log seed {seed}: {err}");
        }
    }

    #[test]
    fn softmax_gradient_matches_explicit_jacobian() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let x = rand_tensor(&[1, 6], &mut rng);
        let w: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let y = tape.softmax_rows(xv).unwrap();
        let wv = tape.input(Tensor::new(vec![6, 1], w.clone()).unwrap());
        let out = tape.matmul(y, wv).unwrap();
        let grads = tape.backward(out).unwrap();
        let p = tape.value(y).values();
        for j in 0..6 {
            // (J^T w)_j with J_ij = p_i (δ_ij - p_j)
            let expected: f64 = (0..6)
                .map(|i| w[i] * p[i] * (if i == j { 1.0 } else { 0.0 } - p[j]))
                .sum();
            assert!((grads.wrt(xv).unwrap()[j] - expected).abs() < 1e-10);
        }
    }

    #[test]
    fn shared_parameter_nodes_are_deduplicated() {
        let mut store = ParamStore::new();
        let id = store.add("w", Tensor::full(&[2, 2], 0.5)).unwrap();
        let mut tape = Tape::new();
        let a = tape.param(&store, id);
        let b = tape.param(&store, id);
        assert_eq!(a, b);
        assert_eq!(tape.param_var(id), Some(a));
    }

    #[test]
    fn empty_denominator_is_an_error() {
        let mut tape = Tape::new();
        let l = tape.input(Tensor::zeros(&[1, 2]));
        assert!(tape.cross_entropy_rows(l, &[0], &[false, false]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn attention_weights_are_distributions(
            groups in 1usize..4, lq in 1usize..4, lk in 1usize..6, heads in 1usize..4, dh in 1usize..4, seed: u64,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let d = heads * dh;
            let mut tape = Tape::new();
            let q = tape.input(rand_tensor(&[groups * lq, d], &mut rng));
            let k = tape.input(rand_tensor(&[groups * lk, d], &mut rng));
            let v = tape.input(rand_tensor(&[groups * lk, d], &mut rng));
            let a = tape.attention(q, k, v, heads, groups).unwrap();
            let probs = tape.attention_weights(a).unwrap();
            proptest::prop_assert_eq!(probs.len(), groups * heads * lq * lk);
            for p in probs.chunks(lk) {
                proptest::prop_assert!(p.iter().all(|&w| w >= 0.0));
                proptest::prop_assert!((p.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
