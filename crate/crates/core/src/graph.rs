// SPDX-License-Identifier: Apache-2.0

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so backward is a single reverse sweep. Nodes that no
//! trainable parameter or grad-tracking input feeds into are never visited.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::tensor::{gelu, gelu_derivative, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

pub const RMS_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVector(Var, Var),
    Gelu(Var),
    SoftmaxRows(Var),
    ScaleRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    RmsNorm(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation over `f64` tensors.
#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

impl Graph {
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

    /// The stored parameter a leaf was created from, if any.
    pub fn param_id(&self, v: Var) -> Option<ParamId> {
        match self.nodes[v.0].op {
            Op::Param(id) => Some(id),
            _ => None,
        }
    }

    /// Node created for a stored parameter by [`Graph::param`], if any.
    pub fn param_var(&self, id: ParamId) -> Option<Var> {
        self.param_vars.get(&id).copied()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is tracked (used by gradient checks on inputs).
    pub fn tracked_input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf for a stored parameter. Repeated calls return the same node.
    /// Frozen parameters are recorded without gradient tracking.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Param(id), p.trainable);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Elementwise product of equally shaped tensors.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).mul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).scale(c);
        let rg = self.rg(a);
        self.push(value, Op::Scale(a, c), rg)
    }

    pub fn add_row_vector(&mut self, x: Var, bias: Var) -> Result<Var> {
        let value = self.value(x).add_row_vector(self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(value, Op::AddRowVector(x, bias), rg))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(value, Op::Gelu(x), rg)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).softmax_rows(false)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Softmax over each row restricted to columns `0..=row`.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).softmax_rows(true)?;
        let rg = self.rg(x);
        // The masked entries are exactly zero, so the plain softmax VJP applies.
        Ok(self.push(value, Op::SoftmaxRows(x), rg))
    }

    /// Multiplies row `i` of `x` (`[n, k]`) by `gate[i]` (`[n, 1]`).
    pub fn scale_rows(&mut self, x: Var, gate: Var) -> Result<Var> {
        let xv = self.value(x);
        let gv = self.value(gate);
        let (n, k) = xv.expect_matrix("scale_rows")?;
        if gv.shape() != [n, 1] {
            return Err(Error::dim("scale_rows", xv.shape(), gv.shape()));
        }
        let mut data = xv.data().to_vec();
        for i in 0..n {
            let g = gv.data()[i];
            for d in &mut data[i * k..(i + 1) * k] {
                *d *= g;
            }
        }
        let value = Tensor::new(vec![n, k], data)?;
        let rg = self.rg(x) || self.rg(gate);
        Ok(self.push(value, Op::ScaleRows(x, gate), rg))
    }

    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let value = self.value(x).gather_rows(indices)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::GatherRows(x, indices.to_vec()), rg))
    }

    /// Places row `r` of `x` at output row `indices[r]` of an `[rows, k]`
    /// zero matrix. Indices must be distinct.
    pub fn scatter_rows(&mut self, x: Var, indices: &[usize], rows: usize) -> Result<Var> {
        let xv = self.value(x);
        let (m, k) = xv.expect_matrix("scatter_rows")?;
        if indices.len() != m {
            return Err(Error::dim("scatter_rows", xv.shape(), &[indices.len()]));
        }
        let mut out = Tensor::zeros(&[rows, k]);
        let mut seen = vec![false; rows];
        for (r, &i) in indices.iter().enumerate() {
            if i >= rows || seen[i] {
                return Err(Error::contract(format!(
                    "scatter_rows index {i} out of range or repeated"
                )));
            }
            seen[i] = true;
            out.data_mut()[i * k..(i + 1) * k].copy_from_slice(xv.row(r));
        }
        let rg = self.rg(x);
        Ok(self.push(out, Op::ScatterRows(x, indices.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_cols(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceCols(x, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_cols of nothing"))?;
        let n = self.value(*first).expect_matrix("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).expect_matrix("concat_cols")?;
            if r != n {
                return Err(Error::dim("concat_cols", self.value(*first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(n * total);
        for i in 0..n {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::new(vec![n, total], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat_rows of nothing"))?;
        let k = self.value(*first).expect_matrix("concat_rows")?.1;
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let (r, c) = self.value(p).expect_matrix("concat_rows")?;
            if c != k {
                return Err(Error::dim("concat_rows", self.value(*first).shape(), self.value(p).shape()));
            }
            data.extend_from_slice(self.value(p).data());
            n += r;
        }
        let value = Tensor::new(vec![n, k], data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `x / sqrt(mean(x^2) + eps)` per row, no learned gain.
    pub fn rms_norm(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, k) = xv.expect_matrix("rms_norm")?;
        let mut data = xv.data().to_vec();
        for i in 0..n {
            let row = &mut data[i * k..(i + 1) * k];
            let inv = 1.0 / rms(row);
            for v in row {
                *v *= inv;
            }
        }
        let value = Tensor::new(vec![n, k], data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::RmsNorm(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let rg = self.rg(x);
        self.push(value, Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::scalar(xv.sum() / xv.numel() as f64);
        let rg = self.rg(x);
        self.push(value, Op::Mean(x), rg)
    }

    /// Column means of an `[n, k]` matrix as a `[1, k]` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (n, k) = xv.expect_matrix("mean_rows")?;
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut out = vec![0.0; k];
        for i in 0..n {
            for (o, v) in out.iter_mut().zip(xv.row(i)) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let value = Tensor::new(vec![1, k], out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::MeanRows(x), rg))
    }

    /// Mean negative log-likelihood of `targets` under row-softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let (n, v) = lv.expect_matrix("cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", lv.shape(), &[targets.len()]));
        }
        if n == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut total = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::contract(format!(
                    "target {t} out of range for vocabulary {v}"
                )));
            }
            let row = lv.row(i);
            total += log_sum_exp(row) - row[t];
        }
        let value = Tensor::scalar(total / n as f64);
        let rg = self.rg(logits);
        Ok(self.push(value, Op::CrossEntropy(logits, targets.to_vec()), rg))
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut visited = 0;
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            visited += 1;
            self.propagate(node, &g, &mut adj)?;
            adj[idx] = Some(g);
        }
        Ok(Gradients { adj, visited })
    }

    /// Runs backward and accumulates into the trainable parameters of `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.backward(loss)?;
        for (&id, &v) in &self.param_vars {
            let p = store.get_mut(id);
            if !p.trainable {
                continue;
            }
            if let Some(g) = grads.wrt(v) {
                for (acc, d) in p.grad.data_mut().iter_mut().zip(g.data()) {
                    *acc += d;
                }
            }
        }
        Ok(grads)
    }

    fn accumulate(&self, adj: &mut [Option<Tensor>], target: Var, delta: Tensor) {
        if !self.rg(target) {
            return;
        }
        match &mut adj[target.0] {
            Some(existing) => {
                for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    let bt = self.value(*b).transpose()?;
                    self.accumulate(adj, *a, g.matmul(&bt)?);
                }
                if self.rg(*b) {
                    let at = self.value(*a).transpose()?;
                    self.accumulate(adj, *b, at.matmul(g)?);
                }
            }
            Op::Transpose(a) => self.accumulate(adj, *a, g.transpose()?),
            Op::Add(a, b) => {
                self.accumulate(adj, *a, g.clone());
                self.accumulate(adj, *b, g.clone());
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(adj, *a, g.mul(self.value(*b))?);
                }
                if self.rg(*b) {
                    self.accumulate(adj, *b, g.mul(self.value(*a))?);
                }
            }
            Op::Scale(a, c) => self.accumulate(adj, *a, g.scale(*c)),
            Op::AddRowVector(x, bias) => {
                self.accumulate(adj, *x, g.clone());
                if self.rg(*bias) {
                    let (n, k) = g.expect_matrix("add_row_vector")?;
                    let mut db = vec![0.0; k];
                    for i in 0..n {
                        for (d, v) in db.iter_mut().zip(g.row(i)) {
                            *d += v;
                        }
                    }
                    let shape = self.value(*bias).shape().to_vec();
                    self.accumulate(adj, *bias, Tensor::new(shape, db)?);
                }
            }
            Op::Gelu(x) => {
                let dx = Tensor::new(
                    g.shape().to_vec(),
                    g.data()
                        .iter()
                        .zip(self.value(*x).data())
                        .map(|(gi, &xi)| gi * gelu_derivative(xi))
                        .collect(),
                )?;
                self.accumulate(adj, *x, dx);
            }
            Op::SoftmaxRows(x) => {
                let y = &node.value;
                let (n, k) = y.expect_matrix("softmax_rows")?;
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..k {
                        dx[i * k + j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(adj, *x, Tensor::new(vec![n, k], dx)?);
            }
            Op::ScaleRows(x, gate) => {
                let xv = self.value(*x);
                let gv = self.value(*gate);
                let (n, k) = xv.expect_matrix("scale_rows")?;
                if self.rg(*x) {
                    let mut dx = g.data().to_vec();
                    for i in 0..n {
                        for d in &mut dx[i * k..(i + 1) * k] {
                            *d *= gv.data()[i];
                        }
                    }
                    self.accumulate(adj, *x, Tensor::new(vec![n, k], dx)?);
                }
                if self.rg(*gate) {
                    let dg = (0..n)
                        .map(|i| g.row(i).iter().zip(xv.row(i)).map(|(a, b)| a * b).sum())
                        .collect();
                    self.accumulate(adj, *gate, Tensor::new(vec![n, 1], dg)?);
                }
            }
            Op::GatherRows(x, indices) => {
                let shape = self.value(*x).shape().to_vec();
                let k = shape[1];
                let mut dx = Tensor::zeros(&shape);
                for (r, &i) in indices.iter().enumerate() {
                    for (d, v) in dx.data_mut()[i * k..(i + 1) * k].iter_mut().zip(g.row(r)) {
                        *d += v;
                    }
                }
                self.accumulate(adj, *x, dx);
            }
            Op::ScatterRows(x, indices) => {
                self.accumulate(adj, *x, g.gather_rows(indices)?);
            }
            Op::SliceCols(x, start) => {
                let shape = self.value(*x).shape().to_vec();
                let (n, k) = (shape[0], shape[1]);
                let len = g.cols();
                let mut dx = Tensor::zeros(&shape);
                for i in 0..n {
                    dx.data_mut()[i * k + start..i * k + start + len].copy_from_slice(g.row(i));
                }
                self.accumulate(adj, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let mut start = 0;
                for &p in parts {
                    let len = self.value(p).cols();
                    if self.rg(p) {
                        self.accumulate(adj, p, g.slice_cols(start, len)?);
                    }
                    start += len;
                }
            }
            Op::ConcatRows(parts) => {
                let k = g.cols();
                let mut offset = 0;
                for &p in parts {
                    let shape = self.value(p).shape().to_vec();
                    let len = shape[0] * k;
                    if self.rg(p) {
                        let part = Tensor::new(shape, g.data()[offset..offset + len].to_vec())?;
                        self.accumulate(adj, p, part);
                    }
                    offset += len;
                }
            }
            Op::RmsNorm(x) => {
                let xv = self.value(*x);
                let y = &node.value;
                let (n, k) = xv.expect_matrix("rms_norm")?;
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    let r = rms(xv.row(i));
                    let yr = y.row(i);
                    let gr = g.row(i);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / k as f64;
                    for j in 0..k {
                        dx[i * k + j] = (gr[j] - yr[j] * dot) / r;
                    }
                }
                self.accumulate(adj, *x, Tensor::new(vec![n, k], dx)?);
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape().to_vec();
                self.accumulate(adj, *x, Tensor::full(&shape, g.item()));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let shape = xv.shape().to_vec();
                let c = g.item() / xv.numel() as f64;
                self.accumulate(adj, *x, Tensor::full(&shape, c));
            }
            Op::MeanRows(x) => {
                let shape = self.value(*x).shape().to_vec();
                let (n, k) = (shape[0], shape[1]);
                let mut dx = vec![0.0; n * k];
                for i in 0..n {
                    for j in 0..k {
                        dx[i * k + j] = g.data()[j] / n as f64;
                    }
                }
                self.accumulate(adj, *x, Tensor::new(shape, dx)?);
            }
            Op::CrossEntropy(logits, targets) => {
                let lv = self.value(*logits);
                let (n, v) = lv.expect_matrix("cross_entropy")?;
                let probs = lv.softmax_rows(false)?;
                let c = g.item() / n as f64;
                let mut dx = probs.into_data();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * v + t] -= 1.0;
                }
                for d in &mut dx {
                    *d *= c;
                }
                self.accumulate(adj, *logits, Tensor::new(vec![n, v], dx)?);
            }
        }
        Ok(())
    }
}

fn rms(row: &[f64]) -> f64 {
    let ms = row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64;
    (ms + RMS_NORM_EPS).sqrt()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Adjoints produced by [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients {
    adj: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.adj.get(v.0).and_then(Option::as_ref)
    }

    /// Number of nodes whose VJP was evaluated.
    pub fn visited(&self) -> usize {
        self.visited
    }
}
