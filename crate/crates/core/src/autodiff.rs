//! Tensor-level reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation in execution order. Node inputs always
//! precede the node itself, so the tape is acyclic by construction and the
//! backward sweep is a single pass over the nodes in reverse insertion order.
//!
//! ```
//! use pixel_mamba::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
//! let sq = tape.mul(x, x).unwrap();
//! let loss = tape.sum(sq);
//! let grads = tape.backward(loss).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
//! ```

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ops::{self, RowMix, ScanInputs};
use crate::tensor::Tensor;

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a particular [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    id: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.id
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Silu(Var),
    Sigmoid(Var),
    Softplus(Var),
    LogSigmoid(Var),
    Exp(Var),
    Ln(Var),
    Sum(Var),
    Reshape(Var),
    RmsNorm {
        x: Var,
        gamma: Var,
        inv_rms: Vec<f64>,
    },
    Conv1d(Var, Var),
    Scan {
        inputs: [Var; 6],
        states: ops::ScanCache,
    },
    RowMix {
        sources: Vec<Var>,
        plan: Arc<RowMix>,
    },
    ConcatCols(Vec<Var>),
    LogSoftmax(Var),
    Select(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only record of a forward computation.
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    non_finite: Option<String>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients of a scalar loss with respect to every differentiable leaf.
pub struct Gradients {
    tape: u64,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of a leaf created with [`Tape::param`].
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.id).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(acc) => acc.add_scaled(&g, 1.0),
        None => *slot = Some(g),
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        if !t.is_finite() && self.non_finite.is_none() {
            self.non_finite = Some("leaf input".into());
        }
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable belongs to another tape");
        &self.nodes[v.id].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.id].requires_grad
    }

    /// First non-finite value seen on this tape, if any.
    pub fn check_finite(&self) -> Result<()> {
        match &self.non_finite {
            Some(op) => Err(Error::NonFinite(op.clone())),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.is_finite() {
            self.non_finite = Some(name.into());
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.id].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            id: self.nodes.len() - 1,
        }
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op, name: &'static str) -> Var {
        let value = self.value(x).map(f);
        self.push(value, op, &[x], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(v, Op::Add(a, b), &[a, b], "add"))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(v, Op::Sub(a, b), &[a, b], "sub"))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let v = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(v, Op::Mul(a, b), &[a, b], "mul"))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s), "scale")
    }

    pub fn add_scalar(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v + s, Op::AddScalar(x), "add_scalar")
    }

    /// `x [.., c] + bias [c]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        if bv.len() != xv.cols() {
            return Err(Error::shape("add_row", format!("{:?} + {:?}", xv.shape(), bv.shape())));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + bv.data()[i % c])
            .collect();
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(v, Op::AddRow(x, bias), &[x, bias], "add_row"))
    }

    /// `x [.., c] * gain [c]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (xv, gv) = (self.value(x), self.value(gain));
        if gv.len() != xv.cols() {
            return Err(Error::shape("mul_row", format!("{:?} * {:?}", xv.shape(), gv.shape())));
        }
        let c = xv.cols();
        let data = xv
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v * gv.data()[i % c])
            .collect();
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        Ok(self.push(v, Op::MulRow(x, gain), &[x, gain], "mul_row"))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = ops::matmul(self.value(a), self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b), &[a, b], "matmul"))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(x, ops::silu_scalar, Op::Silu(x), "silu")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, ops::sigmoid_scalar, Op::Sigmoid(x), "sigmoid")
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, ops::softplus_scalar, Op::Softplus(x), "softplus")
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, ops::log_sigmoid_scalar, Op::LogSigmoid(x), "log_sigmoid")
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x), "exp")
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, f64::ln, Op::Ln(x), "ln")
    }

    /// Sum of all entries, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let v = Tensor::scalar(self.value(x).sum());
        self.push(v, Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(x), &[x], "reshape"))
    }

    pub fn rms_norm(&mut self, x: Var, gamma: Var, eps: f64) -> Result<Var> {
        let (v, inv_rms) = ops::rms_norm_forward(self.value(x), self.value(gamma), eps)?;
        Ok(self.push(v, Op::RmsNorm { x, gamma, inv_rms }, &[x, gamma], "rms_norm"))
    }

    pub fn conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let v = ops::causal_depthwise_conv1d(self.value(x), self.value(kernel))?;
        Ok(self.push(v, Op::Conv1d(x, kernel), &[x, kernel], "conv1d"))
    }

    /// Selective scan over `u` with already-projected `delta`, `b`, `c`.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a_log: Var,
        b: Var,
        c: Var,
        d_skip: Var,
    ) -> Result<Var> {
        let inputs = [u, delta, a_log, b, c, d_skip];
        let (y, states) = {
            let si = self.scan_inputs(&inputs);
            match ops::scan_forward(&si) {
                Ok(r) => r,
                Err(Error::NonFinite(_)) => {
                    // keep the tape consistent; the flag surfaces the failure
                    let (len, d) = (si.u.shape()[0], si.u.shape()[1]);
                    let n = si.a_log.shape()[1];
                    (
                        Tensor::full(&[len, d], f64::NAN),
                        ops::ScanCache {
                            states: vec![f64::NAN; len * d * n],
                            decay: vec![f64::NAN; len * d * n],
                        },
                    )
                }
                Err(e) => return Err(e),
            }
        };
        Ok(self.push(y, Op::Scan { inputs, states }, &inputs, "selective_scan"))
    }

    fn scan_inputs(&self, v: &[Var; 6]) -> ScanInputs<'_> {
        ScanInputs {
            u: self.value(v[0]),
            delta: self.value(v[1]),
            a_log: self.value(v[2]),
            b: self.value(v[3]),
            c: self.value(v[4]),
            d_skip: self.value(v[5]),
        }
    }

    pub fn row_mix(&mut self, sources: &[Var], plan: Arc<RowMix>) -> Result<Var> {
        let v = {
            let vals: Vec<&Tensor> = sources.iter().map(|&s| self.value(s)).collect();
            plan.apply(&vals)?
        };
        Ok(self.push(
            v,
            Op::RowMix {
                sources: sources.to_vec(),
                plan,
            },
            sources,
            "row_mix",
        ))
    }

    /// Concatenates 2-D parts with equal row counts along the channel axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        if parts.iter().any(|&p| self.value(p).rows() != rows) {
            return Err(Error::shape("concat_cols", "row counts differ"));
        }
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let v = Tensor::from_parts(vec![rows, total], data);
        Ok(self.push(v, Op::ConcatCols(parts.to_vec()), parts, "concat_cols"))
    }

    /// Row-wise log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut data = Vec::with_capacity(xv.len());
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            data.extend(row.iter().map(|v| v - lse));
        }
        let v = Tensor::from_parts(xv.shape().to_vec(), data);
        self.push(v, Op::LogSoftmax(x), &[x], "log_softmax")
    }

    /// Gathers flat entries into a vector.
    pub fn select(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if indices.is_empty() {
            return Err(Error::Invalid("select needs at least one index".into()));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= xv.len()) {
            return Err(Error::OutOfRange {
                index: bad,
                len: xv.len(),
            });
        }
        let v = Tensor::vector(indices.iter().map(|&i| xv.data()[i]).collect());
        Ok(self.push(v, Op::Select(x, indices.to_vec()), &[x], "select"))
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Every differentiable leaf reachable from `loss` gets a gradient; leaves
    /// that do not influence it get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.tape != self.id || loss.id >= self.nodes.len() {
            return Err(Error::Detached);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        if !self.nodes[loss.id].requires_grad {
            return Err(Error::Detached);
        }
        self.check_finite()?;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(Tensor::ones(lv.shape()));

        for id in (0..=loss.id).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (input, gi) in self.vjp(node, &g) {
                if self.nodes[input.id].requires_grad {
                    accumulate(&mut grads[input.id], gi);
                }
            }
        }

        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn vjp(&self, node: &Node, g: &Tensor) -> Vec<(Var, Tensor)> {
        let val = |v: Var| &self.nodes[v.id].value;
        let needs = |v: Var| self.nodes[v.id].requires_grad;
        let out = &node.value;
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => vec![
                (*a, zip_map(g, val(*b), |x, y| x * y)),
                (*b, zip_map(g, val(*a), |x, y| x * y)),
            ],
            Op::Scale(a, s) => vec![(*a, g.map(|v| v * s))],
            Op::AddScalar(a) => vec![(*a, g.clone())],
            Op::AddRow(x, b) => {
                let c = g.cols();
                let mut gb = vec![0.0; c];
                for (i, v) in g.data().iter().enumerate() {
                    gb[i % c] += v;
                }
                let gb = Tensor::from_parts(val(*b).shape().to_vec(), gb);
                vec![(*x, g.clone()), (*b, gb)]
            }
            Op::MulRow(x, gain) => {
                let c = g.cols();
                let (xv, gv) = (val(*x), val(*gain));
                let mut gg = vec![0.0; c];
                let mut gx = Vec::with_capacity(g.len());
                for (i, v) in g.data().iter().enumerate() {
                    gg[i % c] += v * xv.data()[i];
                    gx.push(v * gv.data()[i % c]);
                }
                vec![
                    (*x, Tensor::from_parts(xv.shape().to_vec(), gx)),
                    (*gain, Tensor::from_parts(gv.shape().to_vec(), gg)),
                ]
            }
            Op::MatMul(a, b) => {
                let mut r = Vec::with_capacity(2);
                if needs(*a) {
                    r.push((*a, ops::matmul_nt(g, val(*b))));
                }
                if needs(*b) {
                    r.push((*b, ops::matmul_tn(val(*a), g)));
                }
                r
            }
            Op::Silu(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| gv * ops::silu_grad_scalar(xv)))],
            Op::Sigmoid(x) => vec![(*x, zip_map(g, out, |gv, s| gv * s * (1.0 - s)))],
            Op::Softplus(x) => {
                vec![(*x, zip_map(g, val(*x), |gv, xv| gv * ops::sigmoid_scalar(xv)))]
            }
            Op::LogSigmoid(x) => {
                vec![(*x, zip_map(g, val(*x), |gv, xv| gv * ops::sigmoid_scalar(-xv)))]
            }
            Op::Exp(x) => vec![(*x, zip_map(g, out, |gv, e| gv * e))],
            Op::Ln(x) => vec![(*x, zip_map(g, val(*x), |gv, xv| gv / xv))],
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Reshape(x) => vec![(*x, Tensor::from_parts(val(*x).shape().to_vec(), g.data().to_vec()))],
            Op::RmsNorm { x, gamma, inv_rms } => {
                let (gx, gg) = ops::rms_norm_backward(val(*x), val(*gamma), inv_rms, g);
                vec![(*x, gx), (*gamma, gg)]
            }
            Op::Conv1d(x, k) => {
                let (gx, gk) = ops::conv1d_backward(val(*x), val(*k), g);
                vec![(*x, gx), (*k, gk)]
            }
            Op::Scan { inputs, states } => {
                let si = self.scan_inputs(inputs);
                let gs = ops::scan_backward(&si, states, g);
                inputs.iter().copied().zip(gs).collect()
            }
            Op::RowMix { sources, plan } => {
                let shapes: Vec<Vec<usize>> =
                    sources.iter().map(|&s| val(s).shape().to_vec()).collect();
                sources.iter().copied().zip(plan.backward(&shapes, g)).collect()
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let mut off = 0;
                let total = g.cols();
                parts
                    .iter()
                    .map(|&p| {
                        let pc = val(p).cols();
                        let mut d = Vec::with_capacity(rows * pc);
                        for r in 0..rows {
                            d.extend_from_slice(&g.data()[r * total + off..r * total + off + pc]);
                        }
                        off += pc;
                        (p, Tensor::from_parts(val(p).shape().to_vec(), d))
                    })
                    .collect()
            }
            Op::LogSoftmax(x) => {
                let mut gx = Vec::with_capacity(g.len());
                for r in 0..g.rows() {
                    let gr = g.row(r);
                    let total: f64 = gr.iter().sum();
                    gx.extend(gr.iter().zip(out.row(r)).map(|(gv, lp)| gv - lp.exp() * total));
                }
                vec![(*x, Tensor::from_parts(out.shape().to_vec(), gx))]
            }
            Op::Select(x, idx) => {
                let mut gx = Tensor::zeros(val(*x).shape());
                for (k, &i) in idx.iter().enumerate() {
                    gx.data_mut()[i] += g.data()[k];
                }
                vec![(*x, gx)]
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::matrix(2, 3, vec![1.0; 6]).unwrap());
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap(), &Tensor::ones(&[2, 3]));
    }

    #[test]
    fn square_gives_double() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn unreachable_leaf_gets_zeros() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        let y = tape.param(Tensor::vector(vec![5.0; 3]));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(y).unwrap(), &Tensor::zeros(&[3]));
    }

    #[test]
    fn loss_errors() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let c = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let s = tape.sum(c);
        assert!(matches!(tape.backward(s), Err(Error::Detached)));

        let mut other = Tape::new();
        let z = other.param(Tensor::scalar(1.0));
        let zs = other.sum(z);
        assert!(matches!(tape.backward(zs), Err(Error::Detached)));
    }

    #[test]
    fn non_finite_is_surfaced() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 2.0]));
        let y = tape.ln(x);
        let l = tape.sum(y);
        assert!(tape.check_finite().is_err());
        assert!(matches!(tape.backward(l), Err(Error::NonFinite(_))));
    }

    #[test]
    fn shape_mismatch_errors() {
        let mut tape = Tape::new();
        let a = tape.param(Tensor::zeros(&[2, 2]));
        let b = tape.param(Tensor::zeros(&[3]));
        assert!(tape.add(a, b).is_err());
        assert!(tape.add_row(a, b).is_err());
        assert!(tape.matmul(b, a).is_err());
    }
}
