//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! A [`Tape`] records every operation in evaluation order. Each recorded
//! result is addressed by a [`Var`] handle. [`Tape::backward`] walks the
//! records in reverse and accumulates gradients into a [`Gradients`] table,
//! summing contributions when a value fans out to several consumers.
//!
//! ```
//! use metaproto::numerics::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, -2.0]));
//! let y = tape.sigmoid(x).unwrap();
//! let loss = tape.sum(y).unwrap();
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().shape(), &[2]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;

use super::tensor::{matmul_into, Tensor};
use crate::error::{Error, Result};

static NEXT_TAPE: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var {
    id: usize,
    tape: u64,
}

impl Var {
    pub fn index(self) -> usize {
        self.id
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Transpose(Var),
    Reshape(Var),
    Sum(Var),
    Relu(Var),
    Sigmoid(Var),
    Mask(Var, Vec<f64>),
    HeavisideSte(Var),
    GradReverse(Var, f64),
    Conv1d { x: Var, kernel: Var, bias: Var },
    MeanTime(Var),
    MaxTime { x: Var, argmax: Vec<usize> },
    NormalizeRows { x: Var, norms: Vec<f64>, floored: Vec<bool> },
    StackRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// One gradient tape. Single-threaded; distinct tapes are independent.
#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// A gradient held as `factor · grad`.
#[derive(Debug)]
struct Pending {
    grad: Tensor,
    factor: f64,
}

impl Pending {
    fn add(&mut self, contrib: Tensor, factor: f64) {
        if factor == self.factor {
            self.grad.add_assign(&contrib);
            return;
        }
        if self.factor != 1.0 {
            self.grad.scale(self.factor);
        }
        self.grad = contrib.zip_map(&self.grad, |c, g| factor * c + g).expect("gradient shapes agree");
        self.factor = 1.0;
    }

    fn resolve(mut self) -> Tensor {
        if self.factor != 1.0 {
            self.grad.scale(self.factor);
        }
        self.grad
    }
}

/// Gradients produced by one backward pass.
#[derive(Debug)]
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`, if `v` lies on a differentiable path.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.id].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var { id, tape: self.id }
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        if v.tape != self.id || v.id >= self.nodes.len() {
            return Err(Error::Parameter("variable belongs to another tape".into()));
        }
        Ok(&self.nodes[v.id].value)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.id].requires_grad)
    }

    fn record(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite output from {}",
                op_name(&op)
            )));
        }
        let rg = self.rg(inputs);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.matmul(self.check(b)?)?;
        self.record(out, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.zip_map(self.check(b)?, |x, y| x + y)?;
        self.record(out, Op::Add(a, b), &[a, b])
    }

    /// `x (R×C) + b (C)` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let bv = self.check(b)?;
        let (_, c) = xv.dims2()?;
        if bv.shape() != [c] {
            return Err(Error::Dimension(format!(
                "row bias of shape {:?} for {c} columns",
                bv.shape()
            )));
        }
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(c) {
            for (o, bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        self.record(out, Op::AddRow(x, b), &[x, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.check(a)?.zip_map(self.check(b)?, |x, y| x * y)?;
        self.record(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.check(x)?.map(|v| v * c);
        self.record(out, Op::Scale(x, c), &[x])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.transpose2()?;
        self.record(out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.check(x)?.clone().reshape(shape.to_vec())?;
        self.record(out, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.check(x)?.sum());
        self.record(out, Op::Sum(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.map(|v| v.max(0.0));
        self.record(out, Op::Relu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.map(sigmoid);
        self.record(out, Op::Sigmoid(x), &[x])
    }

    /// Elementwise multiply by a fixed mask; the mask receives no gradient.
    pub fn mask(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let xv = self.check(x)?;
        if mask.len() != xv.len() {
            return Err(Error::Dimension(format!(
                "mask of {} values for tensor of {}",
                mask.len(),
                xv.len()
            )));
        }
        let mut out = xv.clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o *= m;
        }
        self.record(out, Op::Mask(x, mask), &[x])
    }

    /// Step function with a straight-through backward pass.
    ///
    /// Forward is 1 for `x >= 0` and 0 for `x < 0`.
    pub fn heaviside_ste(&mut self, x: Var) -> Result<Var> {
        let out = self.check(x)?.map(|v| if v >= 0.0 { 1.0 } else { 0.0 });
        self.record(out, Op::HeavisideSte(x), &[x])
    }

    /// Identity forward; backward multiplies the upstream gradient by `-lambda`.
    pub fn grad_reverse(&mut self, x: Var, lambda: f64) -> Result<Var> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::Parameter(format!(
                "gradient reversal needs lambda > 0, got {lambda}"
            )));
        }
        let out = self.check(x)?.clone();
        self.record(out, Op::GradReverse(x, lambda), &[x])
    }

    /// Same-padded 1D cross-correlation over time.
    ///
    /// `x` is `T×C_in`, `kernel` is `W×C_in×C_out`, `bias` is `C_out`.
    /// Padding is `(W-1)/2` frames on the left and the rest on the right.
    pub fn conv1d(&mut self, x: Var, kernel: Var, bias: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let kv = self.check(kernel)?;
        let bv = self.check(bias)?;
        let (t_len, c_in) = xv.dims2()?;
        let (w, kc_in, c_out) = match kv.shape()[..] {
            [w, ci, co] => (w, ci, co),
            _ => {
                return Err(Error::Dimension(format!(
                    "conv kernel must be W×C_in×C_out, got {:?}",
                    kv.shape()
                )))
            }
        };
        if kc_in != c_in || bv.shape() != [c_out] {
            return Err(Error::Dimension(format!(
                "conv1d input channels {c_in}, kernel {:?}, bias {:?}",
                kv.shape(),
                bv.shape()
            )));
        }
        let pad = (w - 1) / 2;
        let xd = xv.data();
        let kd = kv.data();
        let mut out = vec![0.0; t_len * c_out];
        for t in 0..t_len {
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            orow.copy_from_slice(bv.data());
            for k in 0..w {
                let src = t as isize + k as isize - pad as isize;
                if src < 0 || src >= t_len as isize {
                    continue;
                }
                let xrow = &xd[src as usize * c_in..(src as usize + 1) * c_in];
                let kblock = &kd[k * c_in * c_out..(k + 1) * c_in * c_out];
                for (ci, &xval) in xrow.iter().enumerate() {
                    if xval == 0.0 {
                        continue;
                    }
                    let krow = &kblock[ci * c_out..(ci + 1) * c_out];
                    for (o, &kw) in orow.iter_mut().zip(krow) {
                        *o += xval * kw;
                    }
                }
            }
        }
        let out = Tensor::matrix(t_len, c_out, out)?;
        self.record(out, Op::Conv1d { x, kernel, bias }, &[x, kernel, bias])
    }

    /// Per-channel mean over the time axis: `T×C -> C`.
    pub fn mean_over_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let (t_len, c) = xv.dims2()?;
        let mut out = vec![0.0; c];
        for row in xv.data().chunks(c) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = t_len as f64;
        out.iter_mut().for_each(|o| *o /= n);
        self.record(Tensor::vector(out), Op::MeanTime(x), &[x])
    }

    /// Per-channel max over the time axis: `T×C -> C`. Ties resolve to the
    /// lowest time index.
    pub fn max_over_time(&mut self, x: Var) -> Result<Var> {
        let xv = self.check(x)?;
        let (_, c) = xv.dims2()?;
        let mut out: Vec<f64> = xv.row(0).to_vec();
        let mut argmax = vec![0usize; c];
        for (t, row) in xv.data().chunks(c).enumerate().skip(1) {
            for ch in 0..c {
                if row[ch] > out[ch] {
                    out[ch] = row[ch];
                    argmax[ch] = t;
                }
            }
        }
        self.record(Tensor::vector(out), Op::MaxTime { x, argmax }, &[x])
    }

    /// Scales every row to unit L2 norm, flooring norms at `eps`.
    pub fn normalize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let xv = self.check(x)?;
        let (r, c) = xv.dims2()?;
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(r);
        let mut floored = Vec::with_capacity(r);
        for row in out.data_mut().chunks_mut(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let (n, f) = if n > eps { (n, false) } else { (eps, true) };
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
            floored.push(f);
        }
        self.record(out, Op::NormalizeRows { x, norms, floored }, &[x])
    }

    /// Stacks equal-length vectors into a matrix, one per row.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Dimension("stack of zero rows".into()))?;
        let d = self.check(*first)?.len();
        let mut data = Vec::with_capacity(d * rows.len());
        for &r in rows {
            let rv = self.check(r)?;
            if rv.rank() != 1 || rv.len() != d {
                return Err(Error::Dimension(format!(
                    "stack_rows expects vectors of length {d}, got {:?}",
                    rv.shape()
                )));
            }
            data.extend_from_slice(rv.data());
        }
        let out = Tensor::matrix(rows.len(), d, data)?;
        self.record(out, Op::StackRows(rows.to_vec()), rows)
    }

    /// Selects rows of a matrix by index (indices may repeat).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.check(x)?;
        let (r, c) = xv.dims2()?;
        if idx.is_empty() {
            return Err(Error::Dimension("gather of zero rows".into()));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Dimension(format!("row {i} out of {r}")));
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::matrix(idx.len(), c, data)?;
        self.record(out, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Mean over rows of `-log softmax(logits)[label]`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.check(logits)?;
        let (b, n) = lv.dims2()?;
        if labels.len() != b {
            return Err(Error::Parameter(format!(
                "{} labels for {b} rows",
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= n) {
            return Err(Error::Parameter(format!(
                "label {bad} out of range for {n} classes"
            )));
        }
        let mut probs = vec![0.0; b * n];
        let mut loss = 0.0;
        for (i, row) in lv.data().chunks(n).enumerate() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            loss += lse - row[labels[i]];
            for (p, v) in probs[i * n..(i + 1) * n].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / b as f64);
        self.record(
            out,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Propagates gradients from the scalar `loss` back to every value that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.check(loss)?;
        if lv.len() != 1 {
            return Err(Error::Dimension(format!(
                "backward needs a scalar, got {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Pending>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Pending {
            grad: Tensor::full(lv.shape(), 1.0),
            factor: 1.0,
        });
        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(p) = grads[id].take() else { continue };
            self.backprop_node(node, &p.grad, p.factor, &mut grads)?;
            grads[id] = Some(p);
        }
        Ok(Gradients {
            tape: self.id,
            grads: grads.into_iter().map(|p| p.map(Pending::resolve)).collect(),
        })
    }

    /// `g` is the upstream gradient up to the scalar `factor`. Every local
    /// backward rule is linear in `g`, so the factor passes through
    /// untouched and is only applied where paths with different factors
    /// meet, or at the end.
    fn backprop_node(&self, node: &Node, g: &Tensor, factor: f64, grads: &mut [Option<Pending>]) -> Result<()> {
        let val = |v: Var| &self.nodes[v.id].value;
        let acc_scaled = |v: Var, contrib: Tensor, factor: f64, grads: &mut [Option<Pending>]| {
            if !self.nodes[v.id].requires_grad {
                return;
            }
            match &mut grads[v.id] {
                Some(p) => p.add(contrib, factor),
                slot @ None => {
                    *slot = Some(Pending {
                        grad: contrib,
                        factor,
                    })
                }
            }
        };
        let acc = |v: Var, contrib: Tensor, grads: &mut [Option<Pending>]| acc_scaled(v, contrib, factor, grads);
        let wants = |v: Var| self.nodes[v.id].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let (_, n) = val(*b).dims2()?;
                if wants(*a) {
                    // dA = G · Bᵀ
                    let bt = val(*b).transpose2()?;
                    let mut da = vec![0.0; m * k];
                    matmul_into(g.data(), bt.data(), &mut da, m, n, k);
                    acc(*a, Tensor::matrix(m, k, da)?, grads);
                }
                if wants(*b) {
                    // dB = Aᵀ · G
                    let at = val(*a).transpose2()?;
                    let mut db = vec![0.0; k * n];
                    matmul_into(at.data(), g.data(), &mut db, k, m, n);
                    acc(*b, Tensor::matrix(k, n, db)?, grads);
                }
            }
            Op::Add(a, b) => {
                acc(*a, g.clone(), grads);
                acc(*b, g.clone(), grads);
            }
            Op::AddRow(x, b) => {
                acc(*x, g.clone(), grads);
                if wants(*b) {
                    let c = val(*b).len();
                    let mut db = vec![0.0; c];
                    for row in g.data().chunks(c) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*b, Tensor::vector(db), grads);
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    acc(*a, g.zip_map(val(*b), |x, y| x * y)?, grads);
                }
                if wants(*b) {
                    acc(*b, g.zip_map(val(*a), |x, y| x * y)?, grads);
                }
            }
            Op::Scale(x, c) => acc(*x, g.map(|v| v * c), grads),
            Op::Transpose(x) => acc(*x, g.transpose2()?, grads),
            Op::Reshape(x) => acc(*x, g.clone().reshape(val(*x).shape().to_vec())?, grads),
            Op::Sum(x) => {
                let s = g.data()[0];
                acc(*x, Tensor::full(val(*x).shape(), s), grads);
            }
            Op::Relu(x) => {
                let d = g.zip_map(val(*x), |gv, xv| if xv > 0.0 { gv } else { 0.0 })?;
                acc(*x, d, grads);
            }
            Op::Sigmoid(x) => {
                let d = g.zip_map(&node.value, |gv, s| gv * s * (1.0 - s))?;
                acc(*x, d, grads);
            }
            Op::Mask(x, mask) => {
                let mut d = g.clone();
                for (dv, m) in d.data_mut().iter_mut().zip(mask) {
                    *dv *= m;
                }
                acc(*x, d, grads);
            }
            Op::HeavisideSte(x) => acc(*x, g.clone(), grads),
            Op::GradReverse(x, lambda) => acc_scaled(*x, g.clone(), -lambda * factor, grads),
            Op::Conv1d { x, kernel, bias } => {
                let xv = val(*x);
                let kv = val(*kernel);
                let (t_len, c_in) = xv.dims2()?;
                let (w, c_out) = (kv.shape()[0], kv.shape()[2]);
                let pad = (w - 1) / 2;
                let gd = g.data();
                if wants(*bias) {
                    let mut db = vec![0.0; c_out];
                    for row in gd.chunks(c_out) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    acc(*bias, Tensor::vector(db), grads);
                }
                let want_x = wants(*x);
                let want_k = wants(*kernel);
                if want_x || want_k {
                    let xd = xv.data();
                    let kd = kv.data();
                    let mut dx = vec![0.0; if want_x { t_len * c_in } else { 0 }];
                    let mut dk = vec![0.0; if want_k { kd.len() } else { 0 }];
                    for t in 0..t_len {
                        let grow = &gd[t * c_out..(t + 1) * c_out];
                        for k in 0..w {
                            let src = t as isize + k as isize - pad as isize;
                            if src < 0 || src >= t_len as isize {
                                continue;
                            }
                            let s = src as usize;
                            let base = k * c_in * c_out;
                            for ci in 0..c_in {
                                let off = base + ci * c_out;
                                if want_x {
                                    let krow = &kd[off..off + c_out];
                                    let dot: f64 = krow.iter().zip(grow).map(|(a, b)| a * b).sum();
                                    dx[s * c_in + ci] += dot;
                                }
                                if want_k {
                                    let xval = xd[s * c_in + ci];
                                    if xval != 0.0 {
                                        for (d, gv) in dk[off..off + c_out].iter_mut().zip(grow) {
                                            *d += xval * gv;
                                        }
                                    }
                                }
                            }
                        }
                    }
                    if want_x {
                        acc(*x, Tensor::matrix(t_len, c_in, dx)?, grads);
                    }
                    if want_k {
                        acc(*kernel, Tensor::new(kv.shape().to_vec(), dk)?, grads);
                    }
                }
            }
            Op::MeanTime(x) => {
                let (t_len, c) = val(*x).dims2()?;
                let n = t_len as f64;
                let row: Vec<f64> = g.data().iter().map(|v| v / n).collect();
                let mut d = Vec::with_capacity(t_len * c);
                for _ in 0..t_len {
                    d.extend_from_slice(&row);
                }
                acc(*x, Tensor::matrix(t_len, c, d)?, grads);
            }
            Op::MaxTime { x, argmax } => {
                let (t_len, c) = val(*x).dims2()?;
                let mut d = vec![0.0; t_len * c];
                for (ch, &t) in argmax.iter().enumerate() {
                    d[t * c + ch] = g.data()[ch];
                }
                acc(*x, Tensor::matrix(t_len, c, d)?, grads);
            }
            Op::NormalizeRows { x, norms, floored } => {
                let y = &node.value;
                let (_, c) = y.dims2()?;
                let mut d = g.clone();
                for (i, drow) in d.data_mut().chunks_mut(c).enumerate() {
                    let n = norms[i];
                    if floored[i] {
                        drow.iter_mut().for_each(|v| *v /= n);
                        continue;
                    }
                    let yrow = y.row(i);
                    let dot: f64 = yrow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                    for (dv, yv) in drow.iter_mut().zip(yrow) {
                        *dv = (*dv - yv * dot) / n;
                    }
                }
                acc(*x, d, grads);
            }
            Op::StackRows(rows) => {
                let d = g.shape()[1];
                for (i, &r) in rows.iter().enumerate() {
                    acc(r, Tensor::vector(g.data()[i * d..(i + 1) * d].to_vec()), grads);
                }
            }
            Op::GatherRows(x, idx) => {
                if wants(*x) {
                    let (r, c) = val(*x).dims2()?;
                    let mut d = vec![0.0; r * c];
                    for (k, &i) in idx.iter().enumerate() {
                        for (dv, gv) in d[i * c..(i + 1) * c].iter_mut().zip(g.row(k)) {
                            *dv += gv;
                        }
                    }
                    acc(*x, Tensor::matrix(r, c, d)?, grads);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let (b, n) = val(*logits).dims2()?;
                let scale = g.data()[0] / b as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * n + l] -= 1.0;
                }
                d.iter_mut().for_each(|v| *v *= scale);
                acc(*logits, Tensor::matrix(b, n, d)?, grads);
            }
        }
        Ok(())
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddRow(..) => "add_row",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Transpose(..) => "transpose",
        Op::Reshape(..) => "reshape",
        Op::Sum(..) => "sum",
        Op::Relu(..) => "relu",
        Op::Sigmoid(..) => "sigmoid",
        Op::Mask(..) => "mask",
        Op::HeavisideSte(..) => "heaviside",
        Op::GradReverse(..) => "grad_reverse",
        Op::Conv1d { .. } => "conv1d",
        Op::MeanTime(..) => "mean_over_time",
        Op::MaxTime { .. } => "max_over_time",
        Op::NormalizeRows { .. } => "normalize_rows",
        Op::StackRows(..) => "stack_rows",
        Op::GatherRows(..) => "gather_rows",
        Op::CrossEntropy { .. } => "cross_entropy",
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn check_p(p: f64) -> Result<()> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout p must be in [0,1), got {p}")));
    }
    Ok(())
}

/// Inverted elementwise dropout. Identity when `training` is false or `p == 0`.
pub fn dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    check_p(p)?;
    if !training || p == 0.0 {
        return Ok(x);
    }
    let n = tape.check(x)?.len();
    let keep = 1.0 / (1.0 - p);
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    tape.mask(x, mask)
}

/// Inverted dropout of whole channels of a `T×C` sequence.
pub fn channel_dropout<R: Rng + ?Sized>(
    tape: &mut Tape,
    x: Var,
    p: f64,
    rng: &mut R,
    training: bool,
) -> Result<Var> {
    check_p(p)?;
    if !training || p == 0.0 {
        return Ok(x);
    }
    let (t_len, c) = tape.check(x)?.dims2()?;
    let keep = 1.0 / (1.0 - p);
    let per_channel: Vec<f64> = (0..c)
        .map(|_| if rng.random::<f64>() < p { 0.0 } else { keep })
        .collect();
    let mut mask = Vec::with_capacity(t_len * c);
    for _ in 0..t_len {
        mask.extend_from_slice(&per_channel);
    }
    tape.mask(x, mask)
}
