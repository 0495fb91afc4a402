//! Training loop, optimizer, checkpoints and evaluation.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::ops::ControlFlow;
use std::path::Path;

use crate::autodiff::{Tape, Var};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::heads::{
    cross_entropy_on_tape, head_on_tape, predict_class, risk_score, survival_nll_on_tape, LinearHead, Task,
};
use crate::metrics::{accuracy, c_index, km_curve, logrank, macro_f1, KmPoint, LogRank};
use crate::network::{forward_on_tape, Model, NetworkParams};
use crate::parallel::{map_indexed, Parallelism};
use crate::synth::{kfold, Dataset, Sample, Target};
use crate::tensor::{read_tensor, write_tensor, DType, Rng, Tensor};

/// Network plus task head.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainable<T = Tensor> {
    pub net: NetworkParams<T>,
    pub head: LinearHead<T>,
}

impl<T> Trainable<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> Trainable<U> {
        Trainable {
            net: self.net.map(f),
            head: self.head.map(f),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        self.net.visit(f);
        self.head.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        self.net.visit_mut(f);
        self.head.visit_mut(f);
    }
}

impl Trainable {
    fn flat(&self) -> Vec<Tensor> {
        let mut out = Vec::new();
        self.visit(&mut |_, t: &Tensor| out.push(t.clone()));
        out
    }

    fn set_flat(&mut self, mut values: Vec<Tensor>) {
        values.reverse();
        self.visit_mut(&mut |t| *t = values.pop().expect("parameter count"));
    }

    fn names(&self) -> Vec<String> {
        let mut out = Vec::new();
        self.visit(&mut |n, _| out.push(n));
        out
    }
}

/// Everything needed to rebuild and run a trained model.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: NetworkConfig,
    pub task: Task,
    pub params: Trainable,
}

const ARCHIVE_MAGIC: &[u8; 4] = b"PXMK";
const ARCHIVE_VERSION: u32 = 1;

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_string<R: Read>(r: &mut R, len: usize) -> Result<String> {
    if len > 1 << 24 {
        return Err(Error::Format(format!("string of {len} bytes is implausible")));
    }
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::Format("string is not UTF-8".into()))
}

impl Checkpoint {
    /// Fresh random weights.
    pub fn init(config: NetworkConfig, task: Task, seed: u64) -> Result<Self> {
        if task.outputs() == 0 {
            return Err(Error::Invalid("task needs at least one output".into()));
        }
        let mut rng = Rng::new(seed);
        let model = Model::build(config, &mut rng)?;
        let head = LinearHead::init(model.embedding_dim(), task.outputs(), &mut rng);
        Ok(Checkpoint {
            config: model.config,
            task,
            params: Trainable {
                net: model.params,
                head,
            },
        })
    }

    pub fn param_count(&self) -> usize {
        self.params.flat().iter().map(Tensor::len).sum()
    }

    /// Head outputs for one image.
    pub fn logits(&self, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = self.params.map(&mut |t: &Tensor| tape.constant(t.clone()));
        let out = forward_on_tape(&mut tape, &self.config, &p.net, image)?;
        let y = head_on_tape(&mut tape, out.embedding, &p.head)?;
        tape.check_finite()?;
        Ok(tape.value(y).clone())
    }

    pub fn write<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(ARCHIVE_MAGIC)?;
        w.write_all(&ARCHIVE_VERSION.to_le_bytes())?;
        let text = self.config.to_text();
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        let (kind, outputs) = match self.task {
            Task::Classify { classes } => (0u32, classes),
            Task::Survive { bins } => (1u32, bins),
        };
        w.write_all(&kind.to_le_bytes())?;
        w.write_all(&(outputs as u64).to_le_bytes())?;
        let names = self.params.names();
        let values = self.params.flat();
        w.write_all(&(names.len() as u64).to_le_bytes())?;
        for (name, t) in names.iter().zip(&values) {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            write_tensor(w, t, DType::F64)?;
        }
        Ok(())
    }

    pub fn read<R: Read>(r: &mut R) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != ARCHIVE_MAGIC {
            return Err(Error::Format(format!("bad checkpoint magic {magic:?}")));
        }
        let version = read_u32(r)?;
        if version != ARCHIVE_VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let len = read_u64(r)? as usize;
        let config = NetworkConfig::parse(&read_string(r, len)?)?;
        let outputs = |n: u64| n as usize;
        let task = match (read_u32(r)?, read_u64(r)?) {
            (0, n) => Task::Classify { classes: outputs(n) },
            (1, n) => Task::Survive { bins: outputs(n) },
            (k, _) => return Err(Error::Format(format!("unknown task kind {k}"))),
        };
        let mut ckpt = Checkpoint::init(config, task, 0)?;
        let names = ckpt.params.names();
        let skeleton = ckpt.params.flat();
        let count = read_u64(r)? as usize;
        if count != names.len() {
            return Err(Error::Format(format!(
                "checkpoint holds {count} tensors, config needs {}",
                names.len()
            )));
        }
        let mut values = Vec::with_capacity(count);
        for (expect, skel) in names.iter().zip(&skeleton) {
            let len = read_u32(r)? as usize;
            let name = read_string(r, len)?;
            if &name != expect {
                return Err(Error::Format(format!("expected tensor {expect}, found {name}")));
            }
            let t = read_tensor(r)?;
            if t.shape() != skel.shape() {
                return Err(Error::Format(format!(
                    "{name} has shape {:?}, config needs {:?}",
                    t.shape(),
                    skel.shape()
                )));
            }
            values.push(t);
        }
        ckpt.params.set_flat(values);
        Ok(ckpt)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        self.write(&mut f)?;
        f.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
        Self::read(&mut f)
    }

    fn check_data(&self, data: &Dataset) -> Result<()> {
        data.validate()?;
        if data.task != self.task {
            return Err(Error::Invalid(format!(
                "checkpoint is for {:?} but the data is {:?}",
                self.task, data.task
            )));
        }
        Ok(())
    }
}

/// Loss of one slide on a fresh tape.
pub fn slide_loss(tape: &mut Tape, ckpt: &Checkpoint, params: &Trainable<Var>, sample: &Sample) -> Result<Var> {
    let out = forward_on_tape(tape, &ckpt.config, &params.net, &sample.image)?;
    let logits = head_on_tape(tape, out.embedding, &params.head)?;
    match sample.target {
        Target::Class(c) => cross_entropy_on_tape(tape, logits, c),
        Target::Survival(rec) => survival_nll_on_tape(tape, logits, rec),
    }
}

/// Loss and parameter gradients for one slide.
pub fn slide_gradients(ckpt: &Checkpoint, sample: &Sample) -> Result<(f64, Vec<Tensor>)> {
    let mut tape = Tape::new();
    let p = ckpt.params.map(&mut |t: &Tensor| tape.param(t.clone()));
    let loss = slide_loss(&mut tape, ckpt, &p, sample)?;
    let value = tape.value(loss).item();
    let grads = tape.backward(loss)?;
    let mut flat = Vec::new();
    p.visit(&mut |_, v: &Var| flat.push(grads.get(*v).expect("every parameter gets a gradient").clone()));
    Ok((value, flat))
}

/// `base * (1 + cos(pi * step / total)) / 2`.
pub fn cosine_lr(base: f64, step: usize, total: usize) -> f64 {
    if total == 0 {
        return base;
    }
    base * (1.0 + (std::f64::consts::PI * step as f64 / total as f64).cos()) / 2.0
}

/// Adam with decoupled weight decay on the masked tensors.
#[derive(Clone, Debug)]
pub struct AdamW {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    decay_mask: Vec<bool>,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &[Tensor], decay_mask: Vec<bool>, weight_decay: f64) -> Self {
        let zeros: Vec<Tensor> = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        AdamW {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            decay_mask,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn steps(&self) -> usize {
        self.t as usize
    }

    pub fn step(&mut self, params: &mut [Tensor], grads: &[Tensor], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let decay = if self.decay_mask[i] { lr * self.weight_decay } else { 0.0 };
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, (w, &gj)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                *w -= decay * *w + lr * mh / (vh.sqrt() + self.eps);
            }
        }
    }
}

/// Matrices decay; gains, biases, state matrices and the CLS token do not.
fn decay_mask(params: &Trainable) -> Vec<bool> {
    let mut mask = Vec::new();
    params.visit(&mut |name, t: &Tensor| mask.push(t.rank() >= 2 && !name.ends_with("a_log")));
    mask
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Slides per optimizer update.
    pub accum: usize,
    pub cosine: bool,
    /// Global gradient-norm cap applied to each averaged update.
    pub clip: Option<f64>,
    pub shuffle: bool,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 4e-4,
            weight_decay: 0.05,
            accum: 8,
            cosine: true,
            clip: Some(1.0),
            shuffle: true,
            seed: 0,
            parallelism: Parallelism::Rayon,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.accum == 0 {
            return Err(Error::Invalid("accumulation steps must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Invalid("learning rate must be positive, weight decay non-negative".into()));
        }
        if self.clip.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Invalid("gradient clip must be positive".into()));
        }
        Ok(())
    }

    /// Optimizer updates for `slides` slides over all epochs.
    pub fn updates(&self, slides: usize) -> usize {
        (self.epochs * slides).div_ceil(self.accum)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean slide loss over the epoch, measured before each slide's update.
    pub loss: f64,
    /// Learning rate of the last update that finished in this epoch.
    pub lr: f64,
    /// Updates applied so far.
    pub updates: usize,
}

pub fn loss_curve_csv(curve: &[EpochStats]) -> String {
    let mut s = String::from("epoch,loss,lr,updates\n");
    for e in curve {
        let _ = writeln!(s, "{},{:?},{:?},{}", e.epoch, e.loss, e.lr, e.updates);
    }
    s
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub curve: Vec<EpochStats>,
    pub updates: usize,
}

fn global_norm(grads: &[Tensor]) -> f64 {
    grads
        .iter()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

/// Plain-text snapshot written when a run blows up: the failing window, the
/// loss history so far and per-tensor weight magnitudes.
fn divergence_dump(step: usize, lr: f64, ids: &[&str], losses: &[f64], curve: &[EpochStats], ckpt: &Checkpoint) -> String {
    let mut out = String::new();
    let _ = writeln!(out, "step {step}  lr {lr:.6e}");
    let _ = writeln!(out, "window slides: {}", ids.join(" "));
    let _ = writeln!(out, "window losses: {losses:?}");
    out.push_str("\nepoch,loss\n");
    for e in curve {
        let _ = writeln!(out, "{},{}", e.epoch, e.loss);
    }
    out.push_str("\nparameter,max_abs,rms,non_finite\n");
    ckpt.params.visit(&mut |name, t: &Tensor| {
        let d = t.data();
        let max = d.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let rms = (d.iter().map(|v| v * v).sum::<f64>() / d.len().max(1) as f64).sqrt();
        let bad = d.iter().filter(|v| !v.is_finite()).count();
        let _ = writeln!(out, "{name},{max:.6e},{rms:.6e},{bad}");
    });
    out
}

pub fn train(init: Checkpoint, data: &Dataset, tc: &TrainConfig) -> Result<TrainOutcome> {
    train_with(init, data, tc, |_, _| ControlFlow::Continue(()))
}

/// Trains and calls `on_epoch` after every finished epoch with the weights
/// as they stand; returning `Break` stops training there. The schedule always
/// spans the configured epoch count.
///
/// Slides are processed as one stream over all epochs and cut into windows of
/// `accum`; the last window may be shorter. Slides in a window run in
/// parallel and their gradients are summed in stream order, so the result does
/// not depend on thread scheduling.
pub fn train_with(
    init: Checkpoint,
    data: &Dataset,
    tc: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochStats, &Checkpoint) -> ControlFlow<()>,
) -> Result<TrainOutcome> {
    tc.validate()?;
    init.check_data(data)?;
    let n = data.len();
    let root = Rng::new(tc.seed);
    let stream: Vec<(usize, usize)> = (0..tc.epochs)
        .flat_map(|e| {
            let mut order: Vec<usize> = (0..n).collect();
            if tc.shuffle {
                root.fork(e as u64).shuffle(&mut order);
            }
            order.into_iter().map(move |i| (e, i))
        })
        .collect();
    let total = tc.updates(n);
    let mut ckpt = init;
    let mut opt = AdamW::new(&ckpt.params.flat(), decay_mask(&ckpt.params), tc.weight_decay);
    let mut epoch_loss = vec![0.0; tc.epochs];
    let mut epoch_seen = vec![0usize; tc.epochs];
    let mut curve = Vec::with_capacity(tc.epochs);

    for (u, window) in stream.chunks(tc.accum).enumerate() {
        let results = map_indexed(window.len(), tc.parallelism, |j| {
            slide_gradients(&ckpt, &data.samples[window[j].1])
        });
        let lr = if tc.cosine { cosine_lr(tc.lr, u, total) } else { tc.lr };
        let diverged = |detail: String, losses: &[f64]| {
            let ids: Vec<&str> = window.iter().map(|&(_, i)| data.samples[i].id.as_str()).collect();
            Error::Diverged {
                step: u,
                dump: divergence_dump(u, lr, &ids, losses, &curve, &ckpt),
                detail,
            }
        };
        let mut sum: Option<Vec<Tensor>> = None;
        let mut losses = Vec::with_capacity(window.len());
        for (j, res) in results.into_iter().enumerate() {
            let (epoch, idx) = window[j];
            let at = |what: String| format!("epoch {} slide {}: {what}", epoch + 1, data.samples[idx].id);
            let (loss, grads) = match res {
                Ok(r) => r,
                Err(e) if e.is_numeric() => return Err(diverged(at(e.to_string()), &losses)),
                Err(e) => return Err(e),
            };
            losses.push(loss);
            if !loss.is_finite() {
                return Err(diverged(at(format!("loss is {loss}")), &losses));
            }
            epoch_loss[epoch] += loss;
            epoch_seen[epoch] += 1;
            match sum.as_mut() {
                None => sum = Some(grads),
                Some(acc) => acc.iter_mut().zip(&grads).for_each(|(a, g)| a.add_scaled(g, 1.0)),
            }
        }
        let mut grads = sum.expect("windows are non-empty");
        let mut scale = 1.0 / window.len() as f64;
        let norm = global_norm(&grads) * scale;
        if !norm.is_finite() {
            return Err(diverged(format!("gradient norm is {norm}"), &losses));
        }
        if let Some(c) = tc.clip.filter(|&c| norm > c) {
            scale *= c / norm;
        }
        grads.iter_mut().for_each(|g| *g = g.map(|v| v * scale));
        let mut flat = ckpt.params.flat();
        opt.step(&mut flat, &grads, lr);
        ckpt.params.set_flat(flat);

        let last_epoch = window.last().unwrap().0;
        let mut stop = false;
        for e in window.first().unwrap().0..=last_epoch {
            if epoch_seen[e] == n && curve.len() == e {
                let stats = EpochStats {
                    epoch: e + 1,
                    loss: epoch_loss[e] / n as f64,
                    lr,
                    updates: u + 1,
                };
                stop |= on_epoch(&stats, &ckpt).is_break();
                curve.push(stats);
            }
        }
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        checkpoint: ckpt,
        curve,
        updates: opt.steps(),
    })
}

/// Head outputs for every slide, in dataset order.
pub fn predict(ckpt: &Checkpoint, data: &Dataset, par: Parallelism) -> Result<Vec<Tensor>> {
    map_indexed(data.len(), par, |i| ckpt.logits(&data.samples[i].image))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldMetric {
    pub fold: usize,
    pub size: usize,
    /// Macro-F1 or C-index; `None` when undefined on the fold.
    pub value: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SurvivalSplit {
    pub high: Vec<KmPoint>,
    pub low: Vec<KmPoint>,
    pub test: LogRank,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub task: Task,
    pub ids: Vec<String>,
    pub logits: Vec<Tensor>,
    /// Macro-F1 for classification, C-index for survival.
    pub overall: f64,
    pub accuracy: Option<f64>,
    pub folds: Vec<FoldMetric>,
    /// Kaplan-Meier curves and log-rank test for a median risk split.
    pub split: Option<SurvivalSplit>,
}

impl EvalReport {
    pub fn metric_name(&self) -> &'static str {
        match self.task {
            Task::Classify { .. } => "macro_f1",
            Task::Survive { .. } => "c_index",
        }
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("scope,fold,size,metric,value\n");
        let name = self.metric_name();
        let _ = writeln!(s, "all,,{},{name},{:?}", self.ids.len(), self.overall);
        if let Some(a) = self.accuracy {
            let _ = writeln!(s, "all,,{},accuracy,{a:?}", self.ids.len());
        }
        if let Some(sp) = &self.split {
            let _ = writeln!(s, "all,,{},logrank_chi2,{:?}", self.ids.len(), sp.test.chi2);
            let _ = writeln!(s, "all,,{},logrank_p,{:?}", self.ids.len(), sp.test.p);
        }
        for f in &self.folds {
            let v = f.value.map_or(String::from("nan"), |v| format!("{v:?}"));
            let _ = writeln!(s, "fold,{},{},{name},{v}", f.fold + 1, f.size);
        }
        s
    }
}

fn task_metric(task: Task, logits: &[&Tensor], targets: &[Target]) -> Result<f64> {
    match task {
        Task::Classify { classes } => {
            let preds: Vec<usize> = logits.iter().map(|l| predict_class(l)).collect();
            let labels = class_labels(targets);
            macro_f1(&preds, &labels, classes)
        }
        Task::Survive { .. } => {
            let risks: Vec<f64> = logits.iter().map(|l| risk_score(l)).collect();
            let (times, events) = survival_columns(targets);
            c_index(&risks, &times, &events)
        }
    }
}

fn class_labels(targets: &[Target]) -> Vec<usize> {
    targets
        .iter()
        .map(|t| match t {
            Target::Class(c) => *c,
            Target::Survival(_) => unreachable!("validated dataset"),
        })
        .collect()
}

fn survival_columns(targets: &[Target]) -> (Vec<f64>, Vec<bool>) {
    targets
        .iter()
        .map(|t| match t {
            Target::Survival(r) => (r.t as f64, !r.censored),
            Target::Class(_) => unreachable!("validated dataset"),
        })
        .unzip()
}

/// Metrics of a fixed model on `data`, overall and per fold.
pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, folds: usize, seed: u64, par: Parallelism) -> Result<EvalReport> {
    ckpt.check_data(data)?;
    let logits = predict(ckpt, data, par)?;
    let targets: Vec<Target> = data.samples.iter().map(|s| s.target).collect();
    let all: Vec<&Tensor> = logits.iter().collect();
    let overall = task_metric(data.task, &all, &targets)?;
    let labels = data.labels();
    let accuracy = labels.as_ref().map(|l| {
        let preds: Vec<usize> = logits.iter().map(predict_class).collect();
        accuracy(&preds, l)
    });
    let fold_sets = kfold(data.len(), folds.min(data.len()).max(1), seed, labels.as_deref())?;
    let folds = fold_sets
        .iter()
        .enumerate()
        .map(|(f, idx)| {
            let l: Vec<&Tensor> = idx.iter().map(|&i| &logits[i]).collect();
            let t: Vec<Target> = idx.iter().map(|&i| targets[i]).collect();
            FoldMetric {
                fold: f,
                size: idx.len(),
                value: task_metric(data.task, &l, &t).ok(),
            }
        })
        .collect();
    let split = match data.task {
        Task::Survive { .. } if data.len() >= 2 => {
            let risks: Vec<f64> = logits.iter().map(risk_score).collect();
            let (times, events) = survival_columns(&targets);
            let mut order: Vec<usize> = (0..data.len()).collect();
            order.sort_by(|&a, &b| risks[b].total_cmp(&risks[a]).then(a.cmp(&b)));
            let (hi, lo) = order.split_at(data.len() / 2);
            let pick = |ix: &[usize]| -> (Vec<f64>, Vec<bool>) { ix.iter().map(|&i| (times[i], events[i])).unzip() };
            let (ht, he) = pick(hi);
            let (lt, le) = pick(lo);
            Some(SurvivalSplit {
                high: km_curve(&ht, &he)?,
                low: km_curve(&lt, &le)?,
                test: logrank(&ht, &he, &lt, &le)?,
            })
        }
        _ => None,
    };
    Ok(EvalReport {
        task: data.task,
        ids: data.samples.iter().map(|s| s.id.clone()).collect(),
        logits,
        overall,
        accuracy,
        folds,
        split,
    })
}

/// Held-out metric per fold, training a fresh model on the other folds.
pub fn cross_validate(
    config: &NetworkConfig,
    data: &Dataset,
    tc: &TrainConfig,
    folds: usize,
) -> Result<Vec<FoldMetric>> {
    let labels = data.labels();
    let sets = kfold(data.len(), folds, tc.seed, labels.as_deref())?;
    sets.iter()
        .enumerate()
        .map(|(f, held)| {
            let train_idx: Vec<usize> = (0..data.len()).filter(|i| !held.contains(i)).collect();
            let init = Checkpoint::init(config.clone(), data.task, tc.seed.wrapping_add(f as u64))?;
            let out = train(init, &data.subset(&train_idx), tc)?;
            let test = data.subset(held);
            let logits = predict(&out.checkpoint, &test, tc.parallelism)?;
            let l: Vec<&Tensor> = logits.iter().collect();
            let t: Vec<Target> = test.samples.iter().map(|s| s.target).collect();
            Ok(FoldMetric {
                fold: f,
                size: held.len(),
                value: task_metric(data.task, &l, &t).ok(),
            })
        })
        .collect()
}
