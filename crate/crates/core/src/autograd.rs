//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation of one forward pass in execution
//! order, which is already a topological order. [`Graph::backward`] walks the
//! record once in reverse. The tape is rebuilt for each forward pass; running
//! backward twice on the same tape is an error.
//!
//! The graph also keeps the activation-retention ledger used by the cost
//! accountant: every operand of a matmul and every softmax input is marked as
//! stored for backward, unless it is a frozen weight. Each tensor counts once
//! no matter how many operations read it.

use crate::error::{LabError, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LeafKind {
    /// Trainable parameter: gradients are accumulated.
    Param,
    /// Frozen weight: no gradient, never counted as an activation.
    Frozen,
    /// Data entering the graph: no gradient.
    Input,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Softmax(Var),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SelectRows(Var, Vec<usize>),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    MeanRows(Var),
    L2NormRows(Var),
    BroadcastRows(Var),
    BroadcastCols(Var),
    Sum(Var),
    Mean(Var),
    /// Logits, targets, per-entry weights.
    Bce(Var, Tensor, Option<Tensor>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    leaf: Option<LeafKind>,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    retained: Vec<bool>,
    grads: Vec<Option<Tensor>>,
    backward_done: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            leaf: None,
        });
        self.retained.push(false);
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Tensor, kind: LeafKind) -> Var {
        let v = self.push(value, Op::Leaf, kind == LeafKind::Param);
        self.nodes[v.0].leaf = Some(kind);
        v
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Param)
    }

    pub fn frozen(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Frozen)
    }

    pub fn input(&mut self, value: Tensor) -> Var {
        self.leaf(value, LeafKind::Input)
    }

    /// Leaf that is trainable when `trainable` holds, frozen otherwise.
    pub fn weight(&mut self, value: Tensor, trainable: bool) -> Var {
        if trainable {
            self.param(value)
        } else {
            self.frozen(value)
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn retain(&mut self, v: Var) {
        if self.nodes[v.0].leaf != Some(LeafKind::Frozen) {
            self.retained[v.0] = true;
        }
    }

    /// Words of activation storage the backward pass needs under the
    /// retention rule described in the module docs.
    pub fn retained_words(&self) -> u64 {
        self.nodes
            .iter()
            .zip(&self.retained)
            .filter(|(_, &r)| r)
            .map(|(n, _)| n.value.len() as u64)
            .sum()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        self.retain(a);
        self.retain(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    /// `a * b^T`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        self.retain(a);
        self.retain(b);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::add(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::sub(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::mul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = tensor::scale(self.value(a), s);
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = tensor::map(self.value(a), |x| x + s);
        let rg = self.rg(&[a]);
        self.push(out, Op::AddScalar(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::softmax_rows(self.value(a))?;
        self.retain(a);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = tensor::tanh(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = tensor::sigmoid(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = tensor::relu(self.value(a));
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let out = tensor::map(self.value(a), f64::abs);
        let rg = self.rg(&[a]);
        self.push(out, Op::Abs(a), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat_rows(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = tensor::slice_rows(self.value(a), start, end)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let out = tensor::select_rows(self.value(a), idx)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SelectRows(a, idx.to_vec()), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let out = tensor::concat_cols(&vals)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let out = tensor::slice_cols(self.value(a), start, end)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = tensor::transpose(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Transpose(a), rg))
    }

    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::mean_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::MeanRows(a), rg))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var> {
        let out = tensor::l2_normalize_rows(self.value(a))?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::L2NormRows(a), rg))
    }

    pub fn broadcast_rows(&mut self, a: Var, m: usize) -> Result<Var> {
        let out = tensor::broadcast_rows(self.value(a), m)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::BroadcastRows(a), rg))
    }

    pub fn broadcast_cols(&mut self, a: Var, n: usize) -> Result<Var> {
        let out = tensor::broadcast_cols(self.value(a), n)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::BroadcastCols(a), rg))
    }

    /// `x + row`, with the `1 x n` row repeated down `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let m = self.shape(x)[0];
        let b = self.broadcast_rows(row, m)?;
        self.add(x, b)
    }

    /// `x (.) row`, with the `1 x n` row repeated down `x`.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let m = self.shape(x)[0];
        let b = self.broadcast_rows(row, m)?;
        self.mul(x, b)
    }

    /// `x (.) col`, with the `m x 1` column repeated across `x`.
    pub fn mul_col(&mut self, x: Var, col: Var) -> Result<Var> {
        let n = self.value(x).cols();
        let b = self.broadcast_cols(col, n)?;
        self.mul(x, b)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        crate::instrument::add_flops(self.value(a).len() as u64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.value(a).sum() / n as f64;
        crate::instrument::add_flops(n as u64);
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Mean(a), rg)
    }

    /// Mean binary cross-entropy of `logits` against `targets` in `[0, 1]`,
    /// evaluated in the overflow-free form `max(z,0) - z t + ln(1 + e^-|z|)`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        self.bce_impl(logits, targets, None)
    }

    /// `sum(w * bce) / sum(w)`; with unit weights this is
    /// [`Graph::bce_with_logits`].
    pub fn weighted_bce_with_logits(
        &mut self,
        logits: Var,
        targets: &Tensor,
        weights: &Tensor,
    ) -> Result<Var> {
        if weights.shape() != targets.shape() {
            return Err(LabError::dim(
                "weighted_bce_with_logits",
                weights.shape(),
                targets.shape(),
            ));
        }
        if weights.data().iter().any(|&w| !(w >= 0.0)) || !(weights.sum() > 0.0) {
            return Err(LabError::Numeric(
                "BCE weights must be non-negative with a positive sum".into(),
            ));
        }
        self.bce_impl(logits, targets, Some(weights.clone()))
    }

    fn bce_impl(&mut self, logits: Var, targets: &Tensor, weights: Option<Tensor>) -> Result<Var> {
        let z = self.value(logits);
        if z.shape() != targets.shape() {
            return Err(LabError::dim("bce_with_logits", z.shape(), targets.shape()));
        }
        let n = z.len();
        let w = |i: usize| weights.as_ref().map_or(1.0, |w| w.data()[i]);
        let total: f64 = z
            .data()
            .iter()
            .zip(targets.data())
            .enumerate()
            .map(|(i, (&z, &t))| w(i) * (z.max(0.0) - z * t + (-z.abs()).exp().ln_1p()))
            .sum();
        let denom = weights.as_ref().map_or(n as f64, |w| w.sum());
        crate::instrument::add_flops(n as u64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / denom),
            Op::Bce(logits, targets.clone(), weights),
            rg,
        ))
    }

    /// Propagates gradients from the scalar `loss` to every node that
    /// requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(LabError::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(LabError::dim("backward", self.shape(loss), &[1, 1]));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            let acc = |v: Var, t: Tensor, grads: &mut Vec<Option<Tensor>>| -> Result<()> {
                if !self.nodes[v.0].requires_grad {
                    return Ok(());
                }
                match &mut grads[v.0] {
                    Some(existing) => {
                        for (e, x) in existing.data_mut().iter_mut().zip(t.data()) {
                            *e += x;
                        }
                    }
                    slot @ None => *slot = Some(t),
                }
                Ok(())
            };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, tensor::matmul_nt(&g, self.value(*b))?, &mut grads)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, tensor::matmul_tn(self.value(*a), &g)?, &mut grads)?;
                    }
                }
                Op::MatMulNt(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, tensor::matmul(&g, self.value(*b))?, &mut grads)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, tensor::matmul_tn(&g, self.value(*a))?, &mut grads)?;
                    }
                }
                Op::Add(a, b) => {
                    acc(*a, g.clone(), &mut grads)?;
                    acc(*b, g, &mut grads)?;
                }
                Op::Sub(a, b) => {
                    acc(*a, g.clone(), &mut grads)?;
                    acc(*b, tensor::scale(&g, -1.0), &mut grads)?;
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        acc(*a, tensor::mul(&g, self.value(*b))?, &mut grads)?;
                    }
                    if self.nodes[b.0].requires_grad {
                        acc(*b, tensor::mul(&g, self.value(*a))?, &mut grads)?;
                    }
                }
                Op::Scale(a, s) => acc(*a, tensor::scale(&g, *s), &mut grads)?,
                Op::AddScalar(a) => acc(*a, g, &mut grads)?,
                Op::Softmax(a) => {
                    let y = &node.value;
                    let n = y.cols();
                    let mut out = g.clone();
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            out.data_mut()[i * n + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(*a, out, &mut grads)?;
                }
                Op::Tanh(a) => {
                    let d = tensor::map(&node.value, |y| 1.0 - y * y);
                    acc(*a, tensor::mul(&g, &d)?, &mut grads)?;
                }
                Op::Sigmoid(a) => {
                    let d = tensor::map(&node.value, |y| y * (1.0 - y));
                    acc(*a, tensor::mul(&g, &d)?, &mut grads)?;
                }
                Op::Relu(a) => {
                    let d = tensor::map(self.value(*a), |x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(*a, tensor::mul(&g, &d)?, &mut grads)?;
                }
                Op::Abs(a) => {
                    let d = tensor::map(self.value(*a), |x| {
                        if x > 0.0 {
                            1.0
                        } else if x < 0.0 {
                            -1.0
                        } else {
                            0.0
                        }
                    });
                    acc(*a, tensor::mul(&g, &d)?, &mut grads)?;
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let r = self.value(*p).rows();
                        acc(*p, tensor::slice_rows(&g, start, start + r)?, &mut grads)?;
                        start += r;
                    }
                }
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let n = src.cols();
                    let mut full = Tensor::zeros(src.shape());
                    full.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                    acc(*a, full, &mut grads)?;
                }
                Op::SelectRows(a, idx_list) => {
                    let src = self.value(*a);
                    let n = src.cols();
                    let mut full = Tensor::zeros(src.shape());
                    for (k, &i) in idx_list.iter().enumerate() {
                        for j in 0..n {
                            full.data_mut()[i * n + j] += g.data()[k * n + j];
                        }
                    }
                    acc(*a, full, &mut grads)?;
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let c = self.value(*p).cols();
                        acc(*p, tensor::slice_cols(&g, start, start + c)?, &mut grads)?;
                        start += c;
                    }
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let (m, n) = (src.rows(), src.cols());
                    let w = g.cols();
                    let mut full = Tensor::zeros(src.shape());
                    for i in 0..m {
                        full.data_mut()[i * n + start..i * n + start + w].copy_from_slice(g.row(i));
                    }
                    acc(*a, full, &mut grads)?;
                }
                Op::Transpose(a) => acc(*a, tensor::transpose(&g)?, &mut grads)?,
                Op::MeanRows(a) => {
                    let m = self.value(*a).rows();
                    let b = tensor::broadcast_rows(&g, m)?;
                    acc(*a, tensor::scale(&b, 1.0 / m as f64), &mut grads)?;
                }
                Op::L2NormRows(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let n = x.cols();
                    let mut out = Tensor::zeros(x.shape());
                    for i in 0..x.rows() {
                        let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
                        let yr = y.row(i);
                        let gr = g.row(i);
                        let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            out.data_mut()[i * n + j] = (gr[j] - yr[j] * dot) / norm;
                        }
                    }
                    acc(*a, out, &mut grads)?;
                }
                Op::BroadcastRows(a) => {
                    let n = g.cols();
                    let mut out = vec![0.0; n];
                    for i in 0..g.rows() {
                        for (o, x) in out.iter_mut().zip(g.row(i)) {
                            *o += x;
                        }
                    }
                    acc(*a, Tensor::row_vector(out), &mut grads)?;
                }
                Op::BroadcastCols(a) => {
                    let m = g.rows();
                    let out: Vec<f64> = (0..m).map(|i| g.row(i).iter().sum()).collect();
                    acc(*a, Tensor::new(vec![m, 1], out)?, &mut grads)?;
                }
                Op::Sum(a) => {
                    let s = g.data()[0];
                    acc(*a, Tensor::filled(self.shape(*a), s), &mut grads)?;
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let s = g.data()[0] / n;
                    acc(*a, Tensor::filled(self.shape(*a), s), &mut grads)?;
                }
                Op::Bce(a, targets, weights) => {
                    let z = self.value(*a);
                    let denom = weights.as_ref().map_or(z.len() as f64, |w| w.sum());
                    let s = g.data()[0] / denom;
                    let data = z
                        .data()
                        .iter()
                        .zip(targets.data())
                        .enumerate()
                        .map(|(i, (&z, &t))| {
                            let w = weights.as_ref().map_or(1.0, |w| w.data()[i]);
                            s * w * (tensor::sigmoid_scalar(z) - t)
                        })
                        .collect();
                    acc(*a, Tensor::new(z.shape().to_vec(), data)?, &mut grads)?;
                }
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of a node after [`Graph::backward`]. `None` for nodes that do
    /// not require gradients or that the loss does not depend on.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of a trainable leaf, zero-filled when the loss does not
    /// depend on it.
    pub fn grad_or_zero(&self, v: Var) -> Tensor {
        self.grad(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shape(v)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[6.0]);
    }

    #[test]
    fn second_backward_is_error() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(1.0));
        let y = g.scale(x, 2.0);
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(LabError::BackwardTwice)));
    }

    #[test]
    fn no_grad_for_frozen_or_input() {
        let mut g = Graph::new();
        let w = g.frozen(Tensor::scalar(2.0));
        let x = g.input(Tensor::scalar(3.0));
        let p = g.param(Tensor::scalar(4.0));
        let a = g.mul(w, x).unwrap();
        let b = g.mul(a, p).unwrap();
        g.backward(b).unwrap();
        assert!(g.grad(w).is_none());
        assert!(g.grad(x).is_none());
        assert_eq!(g.grad(p).unwrap().data(), &[6.0]);
    }

    #[test]
    fn fan_out_accumulates() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let a = g.scale(x, 3.0);
        let b = g.mul(x, x).unwrap();
        let c = g.add(a, b).unwrap();
        g.backward(c).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn retention_counts_distinct_non_frozen_operands() {
        let mut rng = SplitMix64::new(0);
        let mut g = Graph::new();
        let x = g.input(Tensor::randn(&[3, 4], 1.0, &mut rng));
        let w = g.frozen(Tensor::randn(&[4, 4], 1.0, &mut rng));
        let a = g.matmul(x, w).unwrap();
        let _b = g.matmul(x, w).unwrap();
        let s = g.matmul_nt(a, a).unwrap();
        let _p = g.softmax_rows(s).unwrap();
        // x (12) + a (12) + s (9); w is frozen.
        assert_eq!(g.retained_words(), 12 + 12 + 9);
    }

    #[test]
    fn unit_weights_match_plain_bce() {
        let z = Tensor::from_rows(&[vec![0.3, -2.0], vec![4.0, 0.0]]).unwrap();
        let t = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let mut g = Graph::new();
        let x = g.param(z.clone());
        let a = g.bce_with_logits(x, &t).unwrap();
        let b = g
            .weighted_bce_with_logits(x, &t, &Tensor::filled(&[2, 2], 1.0))
            .unwrap();
        assert_eq!(g.value(a).data(), g.value(b).data());
    }

    #[test]
    fn weighted_bce_hand_value() {
        // Two logits at 0: each term is ln 2 whatever the weights.
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 2]));
        let t = Tensor::row_vector(vec![1.0, 0.0]);
        let y = g
            .weighted_bce_with_logits(x, &t, &Tensor::row_vector(vec![3.0, 1.0]))
            .unwrap();
        assert!((g.value(y).data()[0] - 2f64.ln()).abs() < 1e-15);
        g.backward(y).unwrap();
        // d/dz = w (sigmoid(z) - t) / sum(w).
        let gr = g.grad(x).unwrap().data().to_vec();
        assert!((gr[0] - 3.0 * -0.5 / 4.0).abs() < 1e-15);
        assert!((gr[1] - 0.5 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn weighted_bce_rejects_bad_weights() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 2]));
        let t = Tensor::row_vector(vec![1.0, 0.0]);
        assert!(g
            .weighted_bce_with_logits(x, &t, &Tensor::row_vector(vec![-1.0, 1.0]))
            .is_err());
        assert!(g
            .weighted_bce_with_logits(x, &t, &Tensor::zeros(&[1, 2]))
            .is_err());
        assert!(g
            .weighted_bce_with_logits(x, &t, &Tensor::zeros(&[2, 1]))
            .is_err());
    }
}
