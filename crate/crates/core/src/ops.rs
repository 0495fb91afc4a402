//! Tensor kernels shared by the plain-tensor API and the autodiff tape.
//!
//! Every fused kernel comes with its vector-Jacobian product next to it, so
//! the tape in [`crate::autodiff`] only has to route gradients.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus_scalar(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// `log(sigmoid(x))` without overflow on either tail.
pub fn log_sigmoid_scalar(x: f64) -> f64 {
    -softplus_scalar(-x)
}

pub fn silu_scalar(x: f64) -> f64 {
    x * sigmoid_scalar(x)
}

pub fn silu_grad_scalar(x: f64) -> f64 {
    let s = sigmoid_scalar(x);
    s * (1.0 + x * (1.0 - s))
}

pub fn silu(x: &Tensor) -> Tensor {
    x.map(silu_scalar)
}

pub fn sigmoid(x: &Tensor) -> Tensor {
    x.map(sigmoid_scalar)
}

pub fn softplus(x: &Tensor) -> Tensor {
    x.map(softplus_scalar)
}

fn check_2d(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.rank() != 2 {
        return Err(Error::shape(op, format!("expected rank 2, got {:?}", t.shape())));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

/// `[m, k] x [k, n] -> [m, n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = check_2d("matmul", a)?;
    let (k2, n) = check_2d("matmul", b)?;
    if k != k2 {
        return Err(Error::shape(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out))
}

/// `g [m, n] x b^T -> [m, k]` where `b` is `[k, n]`.
pub(crate) fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = (g.shape()[0], g.shape()[1]);
    let k = b.shape()[0];
    let (gd, bd) = (g.data(), b.data());
    let mut out = vec![0.0; m * k];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            out[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
        }
    }
    Tensor::from_parts(vec![m, k], out)
}

/// `a^T x g -> [k, n]` where `a` is `[m, k]` and `g` is `[m, n]`.
pub(crate) fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = (a.shape()[0], a.shape()[1]);
    let n = g.shape()[1];
    let (ad, gd) = (a.data(), g.data());
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
    Tensor::from_parts(vec![k, n], out)
}

/// RMS normalization over the last axis, scaled by `gamma`.
///
/// Returns the output and the per-row `1/sqrt(mean(x^2)+eps)` factors.
pub fn rms_norm_forward(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>)> {
    let c = x.cols();
    if gamma.len() != c {
        return Err(Error::shape(
            "rms_norm",
            format!("gamma has {} entries, channels {c}", gamma.len()),
        ));
    }
    if eps < 0.0 {
        return Err(Error::Invalid(format!("rms_norm eps must be >= 0, got {eps}")));
    }
    let g = gamma.data();
    let rows = x.rows();
    let mut out = Vec::with_capacity(x.len());
    let mut inv = Vec::with_capacity(rows);
    for r in 0..rows {
        let row = x.row(r);
        let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
        let s = 1.0 / (ms + eps).sqrt();
        inv.push(s);
        out.extend(row.iter().zip(g).map(|(v, gi)| v * s * gi));
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), inv))
}

pub fn rms_norm(x: &Tensor, gamma: &Tensor, eps: f64) -> Result<Tensor> {
    let (out, _) = rms_norm_forward(x, gamma, eps)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("rms_norm".into()));
    }
    Ok(out)
}

pub(crate) fn rms_norm_backward(
    x: &Tensor,
    gamma: &Tensor,
    inv: &[f64],
    gy: &Tensor,
) -> (Tensor, Tensor) {
    let c = x.cols();
    let g = gamma.data();
    let mut gx = Vec::with_capacity(x.len());
    let mut ggamma = vec![0.0; c];
    for (r, &s) in inv.iter().enumerate() {
        let row = x.row(r);
        let gyr = gy.row(r);
        let dot: f64 = (0..c).map(|i| gyr[i] * g[i] * row[i]).sum();
        let k = s * s * s * dot / c as f64;
        for i in 0..c {
            gx.push(s * g[i] * gyr[i] - k * row[i]);
            ggamma[i] += gyr[i] * row[i] * s;
        }
    }
    (
        Tensor::from_parts(x.shape().to_vec(), gx),
        Tensor::from_parts(gamma.shape().to_vec(), ggamma),
    )
}

/// Depthwise causal convolution: `y[t,c] = sum_j kernel[c,j] * x[t-K+1+j, c]`
/// with zero left padding.
pub fn causal_depthwise_conv1d(x: &Tensor, kernel: &Tensor) -> Result<Tensor> {
    let (len, c) = check_2d("conv1d", x)?;
    let (kc, k) = check_2d("conv1d", kernel)?;
    if kc != c {
        return Err(Error::shape(
            "conv1d",
            format!("kernel {:?} for input {:?}", kernel.shape(), x.shape()),
        ));
    }
    let (xd, kd) = (x.data(), kernel.data());
    let mut out = vec![0.0; len * c];
    for t in 0..len {
        for j in 0..k {
            let s = t as isize - (k as isize - 1) + j as isize;
            if s < 0 {
                continue;
            }
            let s = s as usize;
            for ch in 0..c {
                out[t * c + ch] += kd[ch * k + j] * xd[s * c + ch];
            }
        }
    }
    Ok(Tensor::from_parts(vec![len, c], out))
}

pub(crate) fn conv1d_backward(x: &Tensor, kernel: &Tensor, gy: &Tensor) -> (Tensor, Tensor) {
    let (len, c) = (x.shape()[0], x.shape()[1]);
    let k = kernel.shape()[1];
    let (xd, kd, gd) = (x.data(), kernel.data(), gy.data());
    let mut gx = vec![0.0; len * c];
    let mut gk = vec![0.0; c * k];
    for t in 0..len {
        for j in 0..k {
            let s = t as isize - (k as isize - 1) + j as isize;
            if s < 0 {
                continue;
            }
            let s = s as usize;
            for ch in 0..c {
                let g = gd[t * c + ch];
                gx[s * c + ch] += kd[ch * k + j] * g;
                gk[ch * k + j] += xd[s * c + ch] * g;
            }
        }
    }
    (
        Tensor::from_parts(vec![len, c], gx),
        Tensor::from_parts(vec![c, k], gk),
    )
}

/// Inputs of the selective-scan recurrence after the per-token projections.
pub struct ScanInputs<'a> {
    /// `[len, d]`
    pub u: &'a Tensor,
    /// `[len, d]`, already positive (post softplus)
    pub delta: &'a Tensor,
    /// `[d, n]`, the state matrix is `-exp(a_log)`
    pub a_log: &'a Tensor,
    /// `[len, n]`
    pub b: &'a Tensor,
    /// `[len, n]`
    pub c: &'a Tensor,
    /// `[d]`
    pub d_skip: &'a Tensor,
}

impl ScanInputs<'_> {
    fn dims(&self) -> Result<(usize, usize, usize)> {
        let (len, d) = check_2d("selective_scan", self.u)?;
        let (_, n) = check_2d("selective_scan", self.a_log)?;
        let ok = self.delta.shape() == [len, d]
            && self.a_log.shape() == [d, n]
            && self.b.shape() == [len, n]
            && self.c.shape() == [len, n]
            && self.d_skip.len() == d;
        if !ok {
            return Err(Error::shape(
                "selective_scan",
                format!(
                    "u {:?} delta {:?} a_log {:?} b {:?} c {:?} d {:?}",
                    self.u.shape(),
                    self.delta.shape(),
                    self.a_log.shape(),
                    self.b.shape(),
                    self.c.shape(),
                    self.d_skip.shape()
                ),
            ));
        }
        Ok((len, d, n))
    }
}

/// Activations kept by [`scan_forward`] for the backward pass, both laid out
/// `[d][len][n]`.
#[derive(Clone, Debug)]
pub struct ScanCache {
    pub states: Vec<f64>,
    /// Per-step decay `exp(delta * A)`.
    pub decay: Vec<f64>,
}

/// Runs the diagonal selective scan for every channel.
pub fn scan_forward(inp: &ScanInputs) -> Result<(Tensor, ScanCache)> {
    let (len, d, n) = inp.dims()?;
    let (u, dt, al, b, c, ds) = (
        inp.u.data(),
        inp.delta.data(),
        inp.a_log.data(),
        inp.b.data(),
        inp.c.data(),
        inp.d_skip.data(),
    );
    let mut y = vec![0.0; len * d];
    let mut states = vec![0.0; d * len * n];
    let mut decay = vec![0.0; d * len * n];
    let mut a = vec![0.0; n];
    let mut h = vec![0.0; n];
    for ch in 0..d {
        for (ai, &l) in a.iter_mut().zip(&al[ch * n..(ch + 1) * n]) {
            *ai = -l.exp();
        }
        h.iter_mut().for_each(|v| *v = 0.0);
        let base = ch * len * n;
        for t in 0..len {
            let delta = dt[t * d + ch];
            let ut = u[t * d + ch];
            let bt = &b[t * n..(t + 1) * n];
            let ct = &c[t * n..(t + 1) * n];
            let mut acc = 0.0;
            let dec = &mut decay[base + t * n..base + (t + 1) * n];
            for s in 0..n {
                dec[s] = (delta * a[s]).exp();
                h[s] = dec[s] * h[s] + delta * bt[s] * ut;
                acc += ct[s] * h[s];
            }
            states[base + t * n..base + (t + 1) * n].copy_from_slice(&h);
            y[t * d + ch] = acc + ds[ch] * ut;
        }
    }
    let y = Tensor::from_parts(vec![len, d], y);
    if !y.is_finite() {
        return Err(Error::NonFinite("selective_scan".into()));
    }
    Ok((y, ScanCache { states, decay }))
}

/// Gradients of the scan with respect to `(u, delta, a_log, b, c, d_skip)`.
pub(crate) fn scan_backward(inp: &ScanInputs, cache: &ScanCache, gy: &Tensor) -> [Tensor; 6] {
    let states = &cache.states;
    let (len, d) = (inp.u.shape()[0], inp.u.shape()[1]);
    let n = inp.a_log.shape()[1];
    let (u, dt, al, b, c, ds) = (
        inp.u.data(),
        inp.delta.data(),
        inp.a_log.data(),
        inp.b.data(),
        inp.c.data(),
        inp.d_skip.data(),
    );
    let g = gy.data();
    let mut gu = vec![0.0; len * d];
    let mut gdt = vec![0.0; len * d];
    let mut gal = vec![0.0; d * n];
    let mut gb = vec![0.0; len * n];
    let mut gc = vec![0.0; len * n];
    let mut gds = vec![0.0; d];
    let mut a = vec![0.0; n];
    let mut ga = vec![0.0; n];
    let mut dh = vec![0.0; n];
    for ch in 0..d {
        for (ai, &l) in a.iter_mut().zip(&al[ch * n..(ch + 1) * n]) {
            *ai = -l.exp();
        }
        ga.iter_mut().for_each(|v| *v = 0.0);
        dh.iter_mut().for_each(|v| *v = 0.0);
        let base = ch * len * n;
        for t in (0..len).rev() {
            let gyt = g[t * d + ch];
            let delta = dt[t * d + ch];
            let ut = u[t * d + ch];
            gds[ch] += gyt * ut;
            let mut gut = gyt * ds[ch];
            let mut gdelta = 0.0;
            let ht = &states[base + t * n..base + (t + 1) * n];
            for s in 0..n {
                let hprev = if t > 0 { states[base + (t - 1) * n + s] } else { 0.0 };
                gc[t * n + s] += gyt * ht[s];
                let dhs = dh[s] + gyt * c[t * n + s];
                let abar = cache.decay[base + t * n + s];
                let g_abar = dhs * hprev;
                gdelta += g_abar * abar * a[s] + dhs * b[t * n + s] * ut;
                ga[s] += g_abar * abar * delta;
                gb[t * n + s] += dhs * delta * ut;
                gut += dhs * delta * b[t * n + s];
                dh[s] = dhs * abar;
            }
            gu[t * d + ch] += gut;
            gdt[t * d + ch] += gdelta;
        }
        for s in 0..n {
            gal[ch * n + s] = ga[s] * a[s];
        }
    }
    [
        Tensor::from_parts(vec![len, d], gu),
        Tensor::from_parts(vec![len, d], gdt),
        Tensor::from_parts(vec![d, n], gal),
        Tensor::from_parts(vec![len, n], gb),
        Tensor::from_parts(vec![len, n], gc),
        Tensor::from_parts(inp.d_skip.shape().to_vec(), gds),
    ]
}

/// One weighted source row feeding an output row of a [`RowMix`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MixTerm {
    pub src: u32,
    pub row: u32,
    pub weight: f64,
}

/// Sparse linear map whose output rows are weighted sums of rows drawn from
/// several source tensors with a common channel count.
///
/// Flattening, unflattening, reversal, shift-merging, pair averaging and
/// region averaging are all expressed as a `RowMix`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct RowMix {
    starts: Vec<usize>,
    terms: Vec<MixTerm>,
}

impl RowMix {
    pub fn new() -> Self {
        RowMix {
            starts: vec![0],
            terms: Vec::new(),
        }
    }

    pub fn with_capacity(rows: usize) -> Self {
        let mut starts = Vec::with_capacity(rows + 1);
        starts.push(0);
        RowMix {
            starts,
            terms: Vec::with_capacity(rows),
        }
    }

    /// Appends an output row equal to `sum(weight * sources[src][row])`.
    pub fn push_row(&mut self, terms: &[(usize, usize, f64)]) {
        self.terms.extend(terms.iter().map(|&(src, row, weight)| MixTerm {
            src: src as u32,
            row: row as u32,
            weight,
        }));
        self.starts.push(self.terms.len());
    }

    /// Appends a straight copy of one source row.
    pub fn push_copy(&mut self, src: usize, row: usize) {
        self.push_row(&[(src, row, 1.0)]);
    }

    pub fn out_rows(&self) -> usize {
        self.starts.len() - 1
    }

    pub fn row_terms(&self, r: usize) -> &[MixTerm] {
        &self.terms[self.starts[r]..self.starts[r + 1]]
    }

    fn validate(&self, sources: &[&Tensor]) -> Result<usize> {
        let cols = sources
            .first()
            .ok_or_else(|| Error::Invalid("row mix without sources".into()))?
            .cols();
        if sources.iter().any(|s| s.cols() != cols) {
            return Err(Error::shape("row_mix", "sources disagree on channel count"));
        }
        if self.out_rows() == 0 {
            return Err(Error::shape("row_mix", "empty output"));
        }
        for t in &self.terms {
            let src = sources
                .get(t.src as usize)
                .ok_or(Error::OutOfRange {
                    index: t.src as usize,
                    len: sources.len(),
                })?;
            if t.row as usize >= src.rows() {
                return Err(Error::OutOfRange {
                    index: t.row as usize,
                    len: src.rows(),
                });
            }
        }
        Ok(cols)
    }

    pub fn apply(&self, sources: &[&Tensor]) -> Result<Tensor> {
        let cols = self.validate(sources)?;
        let mut out = vec![0.0; self.out_rows() * cols];
        for r in 0..self.out_rows() {
            let orow = &mut out[r * cols..(r + 1) * cols];
            for t in self.row_terms(r) {
                let srow = sources[t.src as usize].row(t.row as usize);
                for (o, s) in orow.iter_mut().zip(srow) {
                    *o += t.weight * s;
                }
            }
        }
        Ok(Tensor::from_parts(vec![self.out_rows(), cols], out))
    }

    /// Transposed map: scatters `gy` back onto the sources.
    pub(crate) fn backward(&self, source_shapes: &[Vec<usize>], gy: &Tensor) -> Vec<Tensor> {
        let mut grads: Vec<Tensor> = source_shapes.iter().map(|s| Tensor::zeros(s)).collect();
        let cols = gy.cols();
        for r in 0..self.out_rows() {
            let grow = gy.row(r);
            for t in self.row_terms(r) {
                let off = t.row as usize * cols;
                let g = &mut grads[t.src as usize].data_mut()[off..off + cols];
                for (a, b) in g.iter_mut().zip(grow) {
                    *a += t.weight * b;
                }
            }
        }
        grads
    }
}
