//! Finite-difference gradient cases shared by the gradient tests and the
//! acceptance run.

use std::sync::Arc;

use pixel_mamba::config::NetworkConfig;
use pixel_mamba::expansion::{expansion_plan, Axis, ExpandMode, ExpansionPlan, ExpansionSpec, PadMode};
use pixel_mamba::fusion::{fused_layout, plan_fusion, MergeWeighting};
use pixel_mamba::heads::survival_nll_on_tape;
use pixel_mamba::ops::RowMix;
use pixel_mamba::ssm::{mamba_block_on_tape, MambaBlockParams, MambaConfig};
use pixel_mamba::synth::{Sample, Target};
use pixel_mamba::train::{slide_loss, Checkpoint};
use pixel_mamba::{Rng, SurvivalRecord, Tape, Task, Tensor, Var};

use super::{gradcheck, probe_weights, weighted_sum, GradCheck};

pub struct Case {
    pub name: String,
    pub tol: f64,
    /// Fraction of checked coordinates that must pass.
    pub min_fraction: f64,
    pub report: GradCheck,
}

impl Case {
    pub fn ok(&self) -> bool {
        self.report.checked > 0 && self.report.fraction() >= self.min_fraction
    }
}

const PRIMITIVE_TOL: f64 = 1e-6;
const PRIMITIVE_FRACTION: f64 = 0.99;

fn rand(shape: &[usize], rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, rng)
}

fn positive(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor {
    Tensor::uniform(shape, lo, hi, rng)
}

fn primitive<F>(name: &str, inputs: Vec<Tensor>, f: F) -> Case
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    Case {
        name: name.into(),
        tol: PRIMITIVE_TOL,
        min_fraction: PRIMITIVE_FRACTION,
        report: gradcheck(f, &inputs, PRIMITIVE_TOL, None),
    }
}

/// Every tape primitive through a random linear probe, plus a two-layer
/// composite.
pub fn primitive_cases(seed: u64) -> Vec<Case> {
    let mut rng = Rng::new(seed);
    let mut cases = Vec::new();

    macro_rules! unary {
        ($name:expr, $x:expr, $op:ident) => {{
            let x: Tensor = $x;
            let w = probe_weights(x.shape(), &mut rng);
            cases.push(primitive($name, vec![x], move |t, v| {
                let y = t.$op(v[0]);
                weighted_sum(t, y, &w)
            }));
        }};
    }
    macro_rules! binary {
        ($name:expr, $a:expr, $b:expr, $out:expr, $op:ident) => {{
            let (a, b): (Tensor, Tensor) = ($a, $b);
            let w = probe_weights(&$out, &mut rng);
            cases.push(primitive($name, vec![a, b], move |t, v| {
                let y = t.$op(v[0], v[1]).unwrap();
                weighted_sum(t, y, &w)
            }));
        }};
    }

    binary!("add", rand(&[3, 4], &mut rng), rand(&[3, 4], &mut rng), [3, 4], add);
    binary!("sub", rand(&[3, 4], &mut rng), rand(&[3, 4], &mut rng), [3, 4], sub);
    binary!("mul", rand(&[3, 4], &mut rng), rand(&[3, 4], &mut rng), [3, 4], mul);
    binary!("add_row", rand(&[3, 4], &mut rng), rand(&[4], &mut rng), [3, 4], add_row);
    binary!("mul_row", rand(&[3, 4], &mut rng), rand(&[4], &mut rng), [3, 4], mul_row);
    binary!("matmul", rand(&[3, 4], &mut rng), rand(&[4, 2], &mut rng), [3, 2], matmul);
    binary!("conv1d", rand(&[8, 3], &mut rng), rand(&[3, 4], &mut rng), [8, 3], conv1d);

    unary!("silu", rand(&[12], &mut rng), silu);
    unary!("sigmoid", rand(&[12], &mut rng), sigmoid);
    unary!("softplus", rand(&[12], &mut rng), softplus);
    unary!("log_sigmoid", rand(&[12], &mut rng), log_sigmoid);
    unary!("exp", rand(&[12], &mut rng), exp);
    unary!("ln", positive(&[12], 0.5, 2.0, &mut rng), ln);
    unary!("log_softmax", rand(&[2, 5], &mut rng), log_softmax);

    {
        let x = rand(&[3, 4], &mut rng);
        cases.push(primitive("sum", vec![x], |t, v| t.sum(v[0])));
    }
    {
        let x = rand(&[3, 4], &mut rng);
        cases.push(primitive("mean", vec![x], |t, v| t.mean(v[0])));
    }
    {
        let x = rand(&[3, 4], &mut rng);
        let w = probe_weights(&[3, 4], &mut rng);
        cases.push(primitive("scale", vec![x], move |t, v| {
            let y = t.scale(v[0], -1.7);
            weighted_sum(t, y, &w)
        }));
    }
    {
        let x = rand(&[3, 4], &mut rng);
        let w = probe_weights(&[3, 4], &mut rng);
        cases.push(primitive("add_scalar", vec![x], move |t, v| {
            let y = t.add_scalar(v[0], 0.3);
            let y = t.mul(y, y).unwrap();
            weighted_sum(t, y, &w)
        }));
    }
    {
        let x = rand(&[3, 4], &mut rng);
        let w = probe_weights(&[2, 6], &mut rng);
        cases.push(primitive("reshape", vec![x], move |t, v| {
            let y = t.reshape(v[0], &[2, 6]).unwrap();
            let y = t.mul(y, y).unwrap();
            weighted_sum(t, y, &w)
        }));
    }
    {
        let (x, g) = (rand(&[4, 5], &mut rng), rand(&[5], &mut rng));
        let w = probe_weights(&[4, 5], &mut rng);
        cases.push(primitive("rms_norm", vec![x, g], move |t, v| {
            let y = t.rms_norm(v[0], v[1], 1e-5).unwrap();
            weighted_sum(t, y, &w)
        }));
    }
    {
        let inputs = vec![
            rand(&[5, 2], &mut rng),
            positive(&[5, 2], 0.1, 1.0, &mut rng),
            rand(&[2, 3], &mut rng),
            rand(&[5, 3], &mut rng),
            rand(&[5, 3], &mut rng),
            rand(&[2], &mut rng),
        ];
        let w = probe_weights(&[5, 2], &mut rng);
        cases.push(primitive("selective_scan", inputs, move |t, v| {
            let y = t.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5]).unwrap();
            weighted_sum(t, y, &w)
        }));
    }
    {
        let mut plan = RowMix::new();
        plan.push_row(&[(0, 2, 0.5), (1, 0, 0.5)]);
        plan.push_copy(1, 1);
        plan.push_row(&[(0, 0, 0.25), (0, 1, -2.0), (1, 1, 1.0)]);
        plan.push_copy(0, 2);
        let plan = Arc::new(plan);
        let w = probe_weights(&[4, 4], &mut rng);
        cases.push(primitive(
            "row_mix",
            vec![rand(&[3, 4], &mut rng), rand(&[2, 4], &mut rng)],
            move |t, v| {
                let y = t.row_mix(&[v[0], v[1]], plan.clone()).unwrap();
                weighted_sum(t, y, &w)
            },
        ));
    }
    {
        let w = probe_weights(&[3, 5], &mut rng);
        cases.push(primitive(
            "concat_cols",
            vec![rand(&[3, 2], &mut rng), rand(&[3, 3], &mut rng)],
            move |t, v| {
                let y = t.concat_cols(&[v[0], v[1]]).unwrap();
                let y = t.mul(y, y).unwrap();
                weighted_sum(t, y, &w)
            },
        ));
    }
    {
        let w = probe_weights(&[4], &mut rng);
        cases.push(primitive("select", vec![rand(&[6], &mut rng)], move |t, v| {
            let y = t.select(v[0], &[0, 3, 3, 5]).unwrap();
            let y = t.exp(y);
            weighted_sum(t, y, &w)
        }));
    }
    {
        let inputs = vec![
            rand(&[4, 3], &mut rng),
            rand(&[3, 5], &mut rng),
            rand(&[5, 3], &mut rng),
            positive(&[3], 0.5, 1.5, &mut rng),
        ];
        cases.push(primitive("two_layer_composite", inputs, |t, v| {
            let h = t.matmul(v[0], v[1]).unwrap();
            let h = t.silu(h);
            let o = t.matmul(h, v[2]).unwrap();
            let o = t.rms_norm(o, v[3], 1e-5).unwrap();
            let ls = t.log_softmax(o);
            let picked = t.select(ls, &[1, 3, 8, 11]).unwrap();
            let s = t.sum(picked);
            t.scale(s, -1.0)
        }));
    }
    cases
}

/// Flattens `visit` order and checks that `map` walks the same order.
fn flatten_block(p: &MambaBlockParams) -> Vec<Tensor> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t: &Tensor| out.push(t.clone()));
    let mut i = 0;
    let idx = p.map(&mut |_| {
        i += 1;
        i - 1
    });
    let mut order = Vec::new();
    idx.visit("", &mut |_, k: &usize| order.push(*k));
    assert_eq!(order, (0..out.len()).collect::<Vec<_>>(), "map and visit disagree on order");
    out
}

/// Hands out `vars` in order; used with `map` to bind stored weights to tape
/// inputs.
fn bind(vars: &[Var]) -> impl FnMut(&Tensor) -> Var + '_ {
    let mut i = 0;
    move |_| {
        i += 1;
        vars[i - 1]
    }
}

/// Randomizes every weight so no branch is silenced by its initialization.
fn jitter_block(p: &mut MambaBlockParams, scale: f64, rng: &mut Rng) {
    p.visit_mut(&mut |t: &mut Tensor| {
        for v in t.data_mut() {
            *v += scale * (2.0 * rng.uniform() - 1.0);
        }
    });
}

pub fn mamba_block_case(seed: u64) -> Case {
    const TOL: f64 = 1e-5;
    let mut rng = Rng::new(seed);
    let mut p = MambaBlockParams::init(4, &MambaConfig::default(), &mut rng);
    jitter_block(&mut p, 0.3, &mut rng);
    let seq = rand(&[12, 4], &mut rng);
    let w = probe_weights(&[12, 4], &mut rng);
    let mut inputs = vec![seq];
    inputs.extend(flatten_block(&p));
    let report = gradcheck(
        |t, v| {
            let pv = p.map(&mut bind(&v[1..]));
            let y = mamba_block_on_tape(t, v[0], &pv).unwrap();
            // probe the branch only; the residual adds rounding noise and a
            // constant identity term
            let branch = t.sub(y, v[0]).unwrap();
            weighted_sum(t, branch, &w)
        },
        &inputs,
        TOL,
        None,
    );
    Case {
        name: "mamba_block [12, 4]".into(),
        tol: TOL,
        min_fraction: PRIMITIVE_FRACTION,
        report,
    }
}

/// One expansion of a 4x4 region with a CLS token, in every axis and mode.
pub fn expand_cases(seed: u64) -> Vec<Case> {
    const TOL: f64 = 1e-6;
    let mut rng = Rng::new(seed);
    let mut cases = Vec::new();
    for axis in [Axis::Horizontal, Axis::Vertical] {
        for mode in [ExpandMode::Cat, ExpandMode::Avg] {
            let spec = ExpansionSpec::new(axis, mode);
            let plan = expansion_plan(4, 4, spec, PadMode::Replicate).unwrap();
            let out_c = spec.out_channels(3);
            let wg = probe_weights(&[8, out_c], &mut rng);
            let wc = probe_weights(&[1, out_c], &mut rng);
            let inputs = vec![rand(&[16, 3], &mut rng), rand(&[1, 3], &mut rng)];
            let report = gradcheck(
                |t, v| {
                    let (grid, cls) = match &plan {
                        ExpansionPlan::Avg(p) => (t.row_mix(&[v[0]], Arc::new(p.clone())).unwrap(), v[1]),
                        ExpansionPlan::Cat(p, q) => {
                            let a = t.row_mix(&[v[0]], Arc::new(p.clone())).unwrap();
                            let b = t.row_mix(&[v[0]], Arc::new(q.clone())).unwrap();
                            (t.concat_cols(&[a, b]).unwrap(), t.concat_cols(&[v[1], v[1]]).unwrap())
                        }
                    };
                    let g = weighted_sum(t, grid, &wg);
                    let c = weighted_sum(t, cls, &wc);
                    t.add(g, c).unwrap()
                },
                &inputs,
                TOL,
                None,
            );
            cases.push(Case {
                name: format!("expand {spec}"),
                tol: TOL,
                min_fraction: PRIMITIVE_FRACTION,
                report,
            });
        }
    }
    cases
}

/// Top-k fusion of six regions with uneven member counts. Pair selection is
/// read from the current CLS values, as in the network.
pub fn fuse_topk_case(seed: u64) -> Case {
    const TOL: f64 = 1e-6;
    let mut rng = Rng::new(seed);
    let members = [1usize, 2, 1, 3, 1, 1];
    let n = members.len();
    let mut inputs = Vec::new();
    for _ in 0..n {
        inputs.push(rand(&[4, 3], &mut rng));
        inputs.push(rand(&[1, 3], &mut rng));
    }
    let k = 2;
    let out_regions = n - k;
    let wg = probe_weights(&[out_regions * 4, 3], &mut rng);
    let wc = probe_weights(&[out_regions, 3], &mut rng);
    let merge = |rows: usize, a: f64, b: f64| {
        let mut plan = RowMix::new();
        for r in 0..rows {
            plan.push_row(&[(0, r, a), (1, r, b)]);
        }
        Arc::new(plan)
    };
    let report = gradcheck(
        |t, v| {
            let cls: Vec<Tensor> = (0..n).map(|i| t.value(v[2 * i + 1]).clone()).collect();
            let refs: Vec<&Tensor> = cls.iter().collect();
            let pairs = plan_fusion(&refs, k).unwrap();
            let mut grids = Vec::new();
            let mut clss = Vec::new();
            for (i, partner) in fused_layout(n, &pairs) {
                match partner {
                    None => {
                        grids.push(v[2 * i]);
                        clss.push(v[2 * i + 1]);
                    }
                    Some(j) => {
                        let (a, b) = MergeWeighting::Members.weights(members[i], members[j]);
                        grids.push(t.row_mix(&[v[2 * i], v[2 * j]], merge(4, a, b)).unwrap());
                        clss.push(t.row_mix(&[v[2 * i + 1], v[2 * j + 1]], merge(1, a, b)).unwrap());
                    }
                }
            }
            let mut stack = RowMix::new();
            for (s, _) in grids.iter().enumerate() {
                for r in 0..4 {
                    stack.push_copy(s, r);
                }
            }
            let all_grids = t.row_mix(&grids, Arc::new(stack)).unwrap();
            let mut cstack = RowMix::new();
            for s in 0..clss.len() {
                cstack.push_copy(s, 0);
            }
            let all_cls = t.row_mix(&clss, Arc::new(cstack)).unwrap();
            let g = weighted_sum(t, all_grids, &wg);
            let c = weighted_sum(t, all_cls, &wc);
            t.add(g, c).unwrap()
        },
        &inputs,
        TOL,
        None,
    );
    Case {
        name: "fuse_topk 6 regions, k=2".into(),
        tol: TOL,
        min_fraction: PRIMITIVE_FRACTION,
        report,
    }
}

pub fn survival_nll_case(seed: u64) -> Case {
    const TOL: f64 = 1e-6;
    let mut rng = Rng::new(seed);
    let records: Vec<SurvivalRecord> = (1..=4)
        .flat_map(|t| [SurvivalRecord::new(t, false), SurvivalRecord::new(t, true)])
        .collect();
    let inputs = vec![Tensor::uniform(&[4], -2.0, 2.0, &mut rng)];
    let report = gradcheck(
        |t, v| {
            let mut total = None;
            for &rec in &records {
                let l = survival_nll_on_tape(t, v[0], rec).unwrap();
                total = Some(match total {
                    None => l,
                    Some(acc) => t.add(acc, l).unwrap(),
                });
            }
            total.unwrap()
        },
        &inputs,
        TOL,
        None,
    );
    Case {
        name: "survival_nll, 8 records".into(),
        tol: TOL,
        min_fraction: PRIMITIVE_FRACTION,
        report,
    }
}

/// End-to-end loss of the 4-layer tiny network on a 16x16 image, checked at
/// `samples` random parameter coordinates.
pub fn network_case(seed: u64, samples: usize) -> Case {
    const TOL: f64 = 1e-4;
    let cfg = NetworkConfig::bundled("tiny-4").unwrap();
    let mut ckpt = Checkpoint::init(cfg, Task::Classify { classes: 4 }, seed).unwrap();
    let mut rng = Rng::new(seed ^ 0x5eed);
    ckpt.params.visit_mut(&mut |t: &mut Tensor| {
        for v in t.data_mut() {
            *v += 0.1 * (2.0 * rng.uniform() - 1.0);
        }
    });
    let sample = Sample {
        id: "grad".into(),
        image: Tensor::uniform(&[16, 16, 3], 0.0, 1.0, &mut rng),
        target: Target::Class(2),
    };
    let mut inputs = Vec::new();
    ckpt.params.visit(&mut |_, t: &Tensor| inputs.push(t.clone()));

    let all: Vec<(usize, usize)> = inputs
        .iter()
        .enumerate()
        .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
        .collect();
    let mut picked = all.clone();
    rng.shuffle(&mut picked);
    picked.truncate(samples);

    let report = gradcheck(
        |t, v| {
            let pv = ckpt.params.map(&mut bind(v));
            slide_loss(t, &ckpt, &pv, &sample).unwrap()
        },
        &inputs,
        TOL,
        Some(&picked),
    );
    Case {
        name: format!("tiny-4 network end to end, {samples} coordinates"),
        tol: TOL,
        min_fraction: 0.95,
        report,
    }
}

pub fn full_suite(seed: u64) -> Vec<Case> {
    let mut cases = primitive_cases(seed);
    cases.push(mamba_block_case(seed + 1));
    cases.extend(expand_cases(seed + 2));
    cases.push(fuse_topk_case(seed + 3));
    cases.push(survival_nll_case(seed + 4));
    cases.push(network_case(seed + 5, 50));
    cases
}
