//! Independent oracles shared by the integration tests.
#![allow(dead_code)]

pub mod grads;

use pixel_mamba::ops::softplus_scalar;
use pixel_mamba::ssm::SsmParams;
use pixel_mamba::{Rng, Tape, Tensor, Var};

pub const FD_STEP: f64 = 1e-5;

/// Absolute agreement below which a coordinate passes regardless of its
/// relative error: the rounding noise of a central difference at `FD_STEP`
/// on an O(1) loss sits around 1e-11.
pub const FD_NOISE_FLOOR: f64 = 1e-10;

/// Outcome of comparing analytic and central-difference gradients.
#[derive(Debug, Default)]
pub struct GradCheck {
    pub checked: usize,
    pub passed: usize,
    /// Passes on relative error alone, without the absolute floor.
    pub strict_passed: usize,
    pub skipped_tiny: usize,
    pub worst: f64,
    /// `(input, index, analytic, numeric)` of coordinates over tolerance.
    pub failures: Vec<(usize, usize, f64, f64)>,
}

impl GradCheck {
    pub fn fraction(&self) -> f64 {
        if self.checked == 0 {
            1.0
        } else {
            self.passed as f64 / self.checked as f64
        }
    }
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let scale = a.abs().max(b.abs());
    if scale == 0.0 {
        0.0
    } else {
        (a - b).abs() / scale
    }
}

fn eval<F>(f: &F, inputs: &[Tensor]) -> f64
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    tape.value(out).item()
}

/// Checks `f` at the given coordinates, or all of them when `coords` is `None`.
/// Coordinates whose analytic and numeric gradients are both below `1e-10`
/// are skipped; the rest pass on relative error `tol` or absolute error
/// [`FD_NOISE_FLOOR`].
pub fn gradcheck<F>(f: F, inputs: &[Tensor], tol: f64, coords: Option<&[(usize, usize)]>) -> GradCheck
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars);
    let grads = tape.backward(out).expect("backward");
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(inputs)
        .map(|(v, t)| grads.get(*v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();

    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let coords = coords.unwrap_or(&all);

    let mut report = GradCheck::default();
    for &(i, j) in coords {
        let mut plus = inputs.to_vec();
        plus[i].data_mut()[j] += FD_STEP;
        let mut minus = inputs.to_vec();
        minus[i].data_mut()[j] -= FD_STEP;
        let numeric = (eval(&f, &plus) - eval(&f, &minus)) / (2.0 * FD_STEP);
        let a = analytic[i].data()[j];
        if a.abs() < 1e-10 && numeric.abs() < 1e-10 {
            report.skipped_tiny += 1;
            continue;
        }
        let e = rel_err(a, numeric);
        report.checked += 1;
        report.worst = report.worst.max(e);
        if e <= tol {
            report.strict_passed += 1;
        }
        if e <= tol || (a - numeric).abs() <= FD_NOISE_FLOOR {
            report.passed += 1;
        } else {
            report.failures.push((i, j, a, numeric));
        }
    }
    report
}

/// Random weights used as a fixed linear functional so gradients of
/// tensor-valued outputs are not all equal.
pub fn probe_weights(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

/// `sum(out ⊙ w)` recorded on the tape.
pub fn weighted_sum(tape: &mut Tape, out: Var, w: &Tensor) -> Var {
    let wv = tape.constant(w.reshape(tape.shape(out)).expect("probe shape"));
    let prod = tape.mul(out, wv).expect("mul");
    tape.sum(prod)
}

fn dot_col(u: &Tensor, t: usize, m: &Tensor, col: usize) -> f64 {
    let d = u.cols();
    let cols = m.cols();
    (0..d).map(|k| u.data()[t * d + k] * m.data()[k * cols + col]).sum()
}

/// Per-step recurrence written directly from the scan definition, one
/// channel and one state at a time.
pub fn naive_selective_scan(u: &Tensor, p: &SsmParams) -> Tensor {
    let (len, d) = (u.rows(), u.cols());
    let n = p.a_log.cols();
    let r = p.dt_down.cols();
    let mut y = vec![0.0; len * d];
    let mut h = vec![vec![0.0; n]; d];
    for t in 0..len {
        let low: Vec<f64> = (0..r).map(|q| dot_col(u, t, &p.dt_down, q)).collect();
        let b: Vec<f64> = (0..n).map(|s| dot_col(u, t, &p.b_proj, s)).collect();
        let c: Vec<f64> = (0..n).map(|s| dot_col(u, t, &p.c_proj, s)).collect();
        for ch in 0..d {
            let pre: f64 = (0..r).map(|q| low[q] * p.dt_up.data()[q * d + ch]).sum::<f64>() + p.dt_bias.data()[ch];
            let delta = softplus_scalar(pre);
            let x = u.data()[t * d + ch];
            let mut acc = 0.0;
            for s in 0..n {
                let a = -p.a_log.data()[ch * n + s].exp();
                h[ch][s] = (delta * a).exp() * h[ch][s] + delta * b[s] * x;
                acc += c[s] * h[ch][s];
            }
            y[t * d + ch] = acc + p.d_skip.data()[ch] * x;
        }
    }
    Tensor::new(vec![len, d], y).unwrap()
}

/// O(n²) pair count: a pair is comparable when the earlier time is an event.
pub fn brute_c_index(risks: &[f64], times: &[f64], events: &[bool]) -> Option<f64> {
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..risks.len() {
        for j in 0..risks.len() {
            if events[i] && times[i] < times[j] {
                den += 1.0;
                if risks[i] > risks[j] {
                    num += 1.0;
                } else if risks[i] == risks[j] {
                    num += 0.5;
                }
            }
        }
    }
    (den > 0.0).then(|| num / den)
}

/// Region counts before each layer when fusing `k = ceil(alpha * n / L)`
/// pairs per layer, capped so a gallery/probe split always has partners.
pub fn simulate_fusion(n0: usize, alpha: f64, layers: usize) -> Vec<(usize, usize)> {
    let mut n = n0;
    let mut out = Vec::with_capacity(layers);
    for _ in 0..layers {
        // exact rational ceiling of alpha * n / layers with alpha in tenths
        let tenths = (alpha * 10.0).round() as usize;
        let k = if n < 2 { 0 } else { (tenths * n).div_ceil(10 * layers).min(n / 2) };
        out.push((n, k));
        n -= k;
    }
    out
}

/// Random scan instance with `len <= max_len`, `N <= 16`, `D <= 8`.
pub fn random_scan_instance(rng: &mut Rng, max_len: usize) -> (Tensor, SsmParams) {
    let len = 1 + rng.below(max_len);
    let n = 1 + rng.below(16);
    let d = 1 + rng.below(8);
    let rank = 1 + rng.below(d);
    let cfg = pixel_mamba::ssm::MambaConfig {
        d_state: n,
        ..Default::default()
    };
    let mut p = SsmParams::init(d, &cfg, rank, rng);
    for v in p.a_log.data_mut() {
        *v += rng.uniform() - 0.5;
    }
    for v in p.dt_bias.data_mut() {
        *v += 2.0 * rng.uniform() - 1.0;
    }
    for v in p.d_skip.data_mut() {
        *v = 2.0 * rng.uniform() - 1.0;
    }
    let u = Tensor::randn(&[len, d], 1.0, rng);
    (u, p)
}

/// Largest elementwise relative error, treating two zeros as equal.
pub fn max_rel_err(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data().iter().zip(b.data()).map(|(&x, &y)| rel_err(x, y)).fold(0.0, f64::max)
}
