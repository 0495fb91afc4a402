//! Task heads on top of the slide embedding: softmax classification and
//! discrete-hazard survival.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::{log_sigmoid_scalar, sigmoid_scalar};
use crate::tensor::{Rng, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Task {
    Classify { classes: usize },
    /// Discrete-time survival over `bins` hazard intervals.
    Survive { bins: usize },
}

impl Task {
    pub fn outputs(&self) -> usize {
        match *self {
            Task::Classify { classes } => classes,
            Task::Survive { bins } => bins,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Task::Classify { .. } => "classify",
            Task::Survive { .. } => "survive",
        }
    }
}

/// Affine map `[C] -> [outputs]`.
#[derive(Clone, Debug, PartialEq)]
pub struct LinearHead<T = Tensor> {
    /// `[C, outputs]`.
    pub w: T,
    /// `[outputs]`.
    pub b: T,
}

impl<T> LinearHead<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> LinearHead<U> {
        LinearHead {
            w: f(&self.w),
            b: f(&self.b),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("head.w".into(), &self.w);
        f("head.b".into(), &self.b);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.w);
        f(&mut self.b);
    }
}

impl LinearHead {
    pub fn init(channels: usize, outputs: usize, rng: &mut Rng) -> Self {
        let s = 1.0 / (channels as f64).sqrt();
        LinearHead {
            w: Tensor::uniform(&[channels, outputs], -s, s, rng),
            b: Tensor::zeros(&[outputs]),
        }
    }

    pub fn logits(&self, embedding: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = self.map(&mut |t: &Tensor| tape.constant(t.clone()));
        let e = tape.constant(embedding.clone());
        let y = head_on_tape(&mut tape, e, &h)?;
        Ok(tape.value(y).clone())
    }
}

/// Logits `[outputs]` for an embedding `[C]`.
pub fn head_on_tape(tape: &mut Tape, embedding: Var, head: &LinearHead<Var>) -> Result<Var> {
    let c = tape.value(embedding).len();
    let row = tape.reshape(embedding, &[1, c])?;
    let y = tape.matmul(row, head.w)?;
    let y = tape.add_row(y, head.b)?;
    let k = tape.shape(y)[1];
    tape.reshape(y, &[k])
}

pub fn cross_entropy_on_tape(tape: &mut Tape, logits: Var, label: usize) -> Result<Var> {
    let k = tape.value(logits).len();
    if label >= k {
        return Err(Error::OutOfRange { index: label, len: k });
    }
    let ls = tape.log_softmax(logits);
    let picked = tape.select(ls, &[label])?;
    let s = tape.sum(picked);
    Ok(tape.scale(s, -1.0))
}

pub fn cross_entropy(logits: &Tensor, label: usize) -> Result<f64> {
    let mut tape = Tape::new();
    let l = tape.constant(logits.clone());
    let loss = cross_entropy_on_tape(&mut tape, l, label)?;
    Ok(tape.value(loss).item())
}

/// Index of the largest logit; ties go to the lowest index.
pub fn predict_class(logits: &Tensor) -> usize {
    let mut best = 0;
    for (i, &v) in logits.data().iter().enumerate() {
        if v > logits.data()[best] {
            best = i;
        }
    }
    best
}

/// Observed survival of one slide.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SurvivalRecord {
    /// Time bin in `1..=bins`.
    pub t: usize,
    /// Right-censored at `t` rather than an observed event.
    pub censored: bool,
}

impl SurvivalRecord {
    pub fn new(t: usize, censored: bool) -> Self {
        SurvivalRecord { t, censored }
    }

    fn check(&self, bins: usize) -> Result<()> {
        if self.t == 0 || self.t > bins {
            return Err(Error::Invalid(format!("time bin {} outside 1..={bins}", self.t)));
        }
        Ok(())
    }
}

pub fn hazards(logits: &Tensor) -> Tensor {
    logits.map(sigmoid_scalar)
}

/// `S(t) = prod_{s <= t} (1 - h(s))`.
pub fn hazard_to_survival(h: &Tensor) -> Result<Tensor> {
    if let Some(bad) = h.data().iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        return Err(Error::Invalid(format!("hazard {bad} outside (0, 1)")));
    }
    let mut s = 1.0;
    let data = h
        .data()
        .iter()
        .map(|&v| {
            s *= 1.0 - v;
            s
        })
        .collect();
    Tensor::new(h.shape().to_vec(), data)
}

/// Negative log-likelihood of one record under hazards `sigmoid(logits)`.
///
/// Censored: `-log S(t)`. Event: `-log S(t-1) - log h(t)`. Both are written
/// with log-sigmoid so saturated logits stay finite.
pub fn survival_nll_on_tape(tape: &mut Tape, logits: Var, rec: SurvivalRecord) -> Result<Var> {
    rec.check(tape.value(logits).len())?;
    let neg = tape.scale(logits, -1.0);
    let log_keep = tape.log_sigmoid(neg);
    let survived = if rec.censored { rec.t } else { rec.t - 1 };
    let mut total = None;
    if survived > 0 {
        let idx: Vec<usize> = (0..survived).collect();
        let s = tape.select(log_keep, &idx)?;
        total = Some(tape.sum(s));
    }
    if !rec.censored {
        let log_h = tape.log_sigmoid(logits);
        let e = tape.select(log_h, &[rec.t - 1])?;
        let e = tape.sum(e);
        total = Some(match total {
            Some(t) => tape.add(t, e)?,
            None => e,
        });
    }
    Ok(tape.scale(total.expect("at least one term"), -1.0))
}

pub fn survival_nll(logits: &Tensor, rec: SurvivalRecord) -> Result<f64> {
    rec.check(logits.len())?;
    let d = logits.data();
    let survived = if rec.censored { rec.t } else { rec.t - 1 };
    let mut ll: f64 = d[..survived].iter().map(|&l| log_sigmoid_scalar(-l)).sum();
    if !rec.censored {
        ll += log_sigmoid_scalar(d[rec.t - 1]);
    }
    Ok(-ll)
}

/// Cumulative hazard `sum_t h(t)`, used as the risk score.
pub fn risk_score(logits: &Tensor) -> f64 {
    logits.data().iter().map(|&l| sigmoid_scalar(l)).sum()
}
