//! Bidirectional selective state-space block.
//!
//! ```text
//! x = fc_x(norm(T)),  z = SiLU(fc_z(norm(T)))
//! T' = fc_out(SSM_f(conv_f(x)) * z + rev(SSM_b(conv_b(rev(x)))) * z) + T
//! ```
//!
//! Each SSM is a diagonal selective scan with input-dependent step size and
//! input-dependent `B`, `C` projections.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::ops::RowMix;
use crate::tensor::{Rng, Tensor};

/// Hyper-parameters of one Mamba block.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaConfig {
    /// State size `N`.
    pub d_state: usize,
    /// Expansion factor `E`, inner width is `E * C`.
    pub expand: usize,
    /// Causal conv width `K`.
    pub d_conv: usize,
    /// Rank of the step-size projection; `None` means `ceil(C / 16)`.
    pub dt_rank: Option<usize>,
    /// One conv kernel for both directions instead of one per direction.
    pub shared_conv: bool,
    pub norm_eps: f64,
}

impl Default for MambaConfig {
    fn default() -> Self {
        MambaConfig {
            d_state: 16,
            expand: 2,
            d_conv: 4,
            dt_rank: None,
            shared_conv: false,
            norm_eps: 1e-5,
        }
    }
}

impl MambaConfig {
    pub fn dt_rank_for(&self, channels: usize) -> usize {
        self.dt_rank.unwrap_or_else(|| channels.div_ceil(16)).max(1)
    }
}

/// Parameters of one scan direction. `T` is `Tensor` for stored weights and
/// [`Var`] once registered on a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct SsmParams<T = Tensor> {
    /// `[D, N]`, state matrix is `-exp(a_log)`.
    pub a_log: T,
    /// `[D, R]` first factor of the step-size projection.
    pub dt_down: T,
    /// `[R, D]` second factor of the step-size projection.
    pub dt_up: T,
    /// `[D]`
    pub dt_bias: T,
    /// `[D, N]`
    pub b_proj: T,
    /// `[D, N]`
    pub c_proj: T,
    /// `[D]`
    pub d_skip: T,
}

impl<T> SsmParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> SsmParams<U> {
        SsmParams {
            a_log: f(&self.a_log),
            dt_down: f(&self.dt_down),
            dt_up: f(&self.dt_up),
            dt_bias: f(&self.dt_bias),
            b_proj: f(&self.b_proj),
            c_proj: f(&self.c_proj),
            d_skip: f(&self.d_skip),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.a_log"), &self.a_log);
        f(format!("{prefix}.dt_down"), &self.dt_down);
        f(format!("{prefix}.dt_up"), &self.dt_up);
        f(format!("{prefix}.dt_bias"), &self.dt_bias);
        f(format!("{prefix}.b_proj"), &self.b_proj);
        f(format!("{prefix}.c_proj"), &self.c_proj);
        f(format!("{prefix}.d_skip"), &self.d_skip);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.a_log);
        f(&mut self.dt_down);
        f(&mut self.dt_up);
        f(&mut self.dt_bias);
        f(&mut self.b_proj);
        f(&mut self.c_proj);
        f(&mut self.d_skip);
    }
}

impl SsmParams {
    pub fn init(inner: usize, cfg: &MambaConfig, rank: usize, rng: &mut Rng) -> Self {
        let n = cfg.d_state;
        let a_log = (0..inner)
            .flat_map(|_| (1..=n).map(|i| (i as f64).ln()))
            .collect();
        let (dt_min, dt_max) = (1e-3f64, 1e-1f64);
        let dt_bias = (0..inner)
            .map(|_| {
                let dt = (rng.uniform() * (dt_max.ln() - dt_min.ln()) + dt_min.ln()).exp();
                // inverse softplus
                dt + (-(-dt).exp_m1()).ln()
            })
            .collect();
        let proj = 1.0 / (inner as f64).sqrt();
        let up = 1.0 / (rank as f64).sqrt();
        SsmParams {
            a_log: Tensor::from_parts(vec![inner, n], a_log),
            dt_down: Tensor::uniform(&[inner, rank], -proj, proj, rng),
            dt_up: Tensor::uniform(&[rank, inner], -up, up, rng),
            dt_bias: Tensor::from_parts(vec![inner], dt_bias),
            b_proj: Tensor::uniform(&[inner, n], -proj, proj, rng),
            c_proj: Tensor::uniform(&[inner, n], -proj, proj, rng),
            d_skip: Tensor::ones(&[inner]),
        }
    }

    pub fn inner(&self) -> usize {
        self.a_log.shape()[0]
    }

    pub fn state(&self) -> usize {
        self.a_log.shape()[1]
    }

    fn validate(&self) -> Result<()> {
        let (d, n) = (self.inner(), self.state());
        let r = self.dt_down.cols();
        let ok = self.dt_down.shape() == [d, r]
            && self.dt_up.shape() == [r, d]
            && self.dt_bias.shape() == [d]
            && self.b_proj.shape() == [d, n]
            && self.c_proj.shape() == [d, n]
            && self.d_skip.shape() == [d];
        if !ok {
            return Err(Error::shape("ssm params", "inconsistent parameter shapes"));
        }
        Ok(())
    }
}

/// Parameters of one bidirectional block.
#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockParams<T = Tensor> {
    /// `[C]`
    pub norm_gamma: T,
    /// `[C, D]`
    pub fc_x: T,
    /// `[C, D]`
    pub fc_z: T,
    /// `[D, K]`
    pub conv_f: T,
    /// `[D, K]`; `None` when the forward kernel is shared.
    pub conv_b: Option<T>,
    pub ssm_f: SsmParams<T>,
    pub ssm_b: SsmParams<T>,
    /// `[D, C]`
    pub fc_out: T,
    pub norm_eps: f64,
}

impl<T> MambaBlockParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> MambaBlockParams<U> {
        MambaBlockParams {
            norm_gamma: f(&self.norm_gamma),
            fc_x: f(&self.fc_x),
            fc_z: f(&self.fc_z),
            conv_f: f(&self.conv_f),
            conv_b: self.conv_b.as_ref().map(&mut *f),
            ssm_f: self.ssm_f.map(f),
            ssm_b: self.ssm_b.map(f),
            fc_out: f(&self.fc_out),
            norm_eps: self.norm_eps,
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, f: &mut impl FnMut(String, &'a T)) {
        f(format!("{prefix}.norm_gamma"), &self.norm_gamma);
        f(format!("{prefix}.fc_x"), &self.fc_x);
        f(format!("{prefix}.fc_z"), &self.fc_z);
        f(format!("{prefix}.conv_f"), &self.conv_f);
        if let Some(cb) = &self.conv_b {
            f(format!("{prefix}.conv_b"), cb);
        }
        self.ssm_f.visit(&format!("{prefix}.ssm_f"), f);
        self.ssm_b.visit(&format!("{prefix}.ssm_b"), f);
        f(format!("{prefix}.fc_out"), &self.fc_out);
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.norm_gamma);
        f(&mut self.fc_x);
        f(&mut self.fc_z);
        f(&mut self.conv_f);
        if let Some(cb) = &mut self.conv_b {
            f(cb);
        }
        self.ssm_f.visit_mut(f);
        self.ssm_b.visit_mut(f);
        f(&mut self.fc_out);
    }
}

impl MambaBlockParams {
    /// Random init with a zero output projection, so the block starts as the
    /// identity map.
    pub fn init(channels: usize, cfg: &MambaConfig, rng: &mut Rng) -> Self {
        let inner = cfg.expand * channels;
        let rank = cfg.dt_rank_for(channels);
        let fc = 1.0 / (channels as f64).sqrt();
        let cv = 1.0 / (cfg.d_conv as f64).sqrt();
        let fc_x = Tensor::uniform(&[channels, inner], -fc, fc, rng);
        let fc_z = Tensor::uniform(&[channels, inner], -fc, fc, rng);
        let conv_f = Tensor::uniform(&[inner, cfg.d_conv], -cv, cv, rng);
        let conv_b = (!cfg.shared_conv).then(|| Tensor::uniform(&[inner, cfg.d_conv], -cv, cv, rng));
        let ssm_f = SsmParams::init(inner, cfg, rank, rng);
        let ssm_b = SsmParams::init(inner, cfg, rank, rng);
        MambaBlockParams {
            norm_gamma: Tensor::ones(&[channels]),
            fc_x,
            fc_z,
            conv_f,
            conv_b,
            ssm_f,
            ssm_b,
            fc_out: Tensor::zeros(&[inner, channels]),
            norm_eps: cfg.norm_eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.norm_gamma.len()
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, t: &Tensor| n += t.len());
        n
    }

    /// Swaps the forward and backward branch parameters.
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        std::mem::swap(&mut out.ssm_f, &mut out.ssm_b);
        if let Some(cb) = out.conv_b.as_mut() {
            std::mem::swap(&mut out.conv_f, cb);
        }
        out
    }

    fn validate(&self, channels: usize) -> Result<()> {
        if self.channels() != channels {
            return Err(Error::shape(
                "mamba_block",
                format!("block expects {} channels, input has {channels}", self.channels()),
            ));
        }
        self.ssm_f.validate()?;
        self.ssm_b.validate()
    }
}

fn reverse_plan(len: usize) -> Arc<RowMix> {
    let mut plan = RowMix::with_capacity(len);
    for r in (0..len).rev() {
        plan.push_copy(0, r);
    }
    Arc::new(plan)
}

/// Step-size and input projections followed by the scan.
pub fn ssm_on_tape(tape: &mut Tape, u: Var, p: &SsmParams<Var>) -> Result<Var> {
    let low = tape.matmul(u, p.dt_down)?;
    let dt = tape.matmul(low, p.dt_up)?;
    let dt = tape.add_row(dt, p.dt_bias)?;
    let delta = tape.softplus(dt);
    let b = tape.matmul(u, p.b_proj)?;
    let c = tape.matmul(u, p.c_proj)?;
    tape.selective_scan(u, delta, p.a_log, b, c, p.d_skip)
}

/// Records one bidirectional block on the tape; `seq` is `[M, C]`.
pub fn mamba_block_on_tape(tape: &mut Tape, seq: Var, p: &MambaBlockParams<Var>) -> Result<Var> {
    let len = tape.shape(seq)[0];
    let normed = tape.rms_norm(seq, p.norm_gamma, p.norm_eps)?;
    let x = tape.matmul(normed, p.fc_x)?;
    let zp = tape.matmul(normed, p.fc_z)?;
    let z = tape.silu(zp);

    let uf = tape.conv1d(x, p.conv_f)?;
    let yf = ssm_on_tape(tape, uf, &p.ssm_f)?;

    let rev = reverse_plan(len);
    let xr = tape.row_mix(&[x], rev.clone())?;
    let ub = tape.conv1d(xr, p.conv_b.unwrap_or(p.conv_f))?;
    let ybr = ssm_on_tape(tape, ub, &p.ssm_b)?;
    let yb = tape.row_mix(&[ybr], rev)?;

    let gf = tape.mul(yf, z)?;
    let gb = tape.mul(yb, z)?;
    let mixed = tape.add(gf, gb)?;
    let out = tape.matmul(mixed, p.fc_out)?;
    tape.add(out, seq)
}

fn constants(tape: &mut Tape) -> impl FnMut(&Tensor) -> Var + '_ {
    |t: &Tensor| tape.constant(t.clone())
}

/// Selective scan of `u [len, D]` with the projections in `p`.
pub fn selective_scan(u: &Tensor, p: &SsmParams) -> Result<Tensor> {
    if u.rank() != 2 || u.cols() != p.inner() {
        return Err(Error::shape(
            "selective_scan",
            format!("input {:?} for inner width {}", u.shape(), p.inner()),
        ));
    }
    p.validate()?;
    let mut tape = Tape::new();
    let pv = p.map(&mut constants(&mut tape));
    let uv = tape.constant(u.clone());
    let y = ssm_on_tape(&mut tape, uv, &pv)?;
    tape.check_finite()?;
    Ok(tape.value(y).clone())
}

/// Applies one block to `seq [M, C]`.
pub fn mamba_block(seq: &Tensor, p: &MambaBlockParams) -> Result<Tensor> {
    if seq.rank() != 2 {
        return Err(Error::shape("mamba_block", format!("expected [M, C], got {:?}", seq.shape())));
    }
    p.validate(seq.cols())?;
    let mut tape = Tape::new();
    let pv = p.map(&mut constants(&mut tape));
    let sv = tape.constant(seq.clone());
    let y = mamba_block_on_tape(&mut tape, sv, &pv)?;
    tape.check_finite()?;
    Ok(tape.value(y).clone())
}
