//! Config-driven layer stack: Mamba block, region fusion and token expansion
//! per layer, then a mean over the surviving CLS tokens.

use std::sync::Arc;

use crate::autodiff::{Tape, Var};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::expansion::{expansion_plan, ExpandMode, ExpansionPlan, ExpansionSpec};
use crate::fusion::{fused_layout, merge_count, plan_fusion, FusionRecord, FusionSchedule};
use crate::ops::RowMix;
use crate::serialization::{flatten_plan, unflatten_plans, window_origins, ScanWindow};
use crate::ssm::{mamba_block_on_tape, MambaBlockParams};
use crate::tensor::{Rng, Tensor};

/// Learnable weights of the stack. Layers without a Mamba block hold `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkParams<T = Tensor> {
    /// `[C0]` initial CLS token shared by every window.
    pub cls_init: T,
    pub blocks: Vec<Option<MambaBlockParams<T>>>,
}

impl<T> NetworkParams<T> {
    pub fn map<U>(&self, f: &mut impl FnMut(&T) -> U) -> NetworkParams<U> {
        NetworkParams {
            cls_init: f(&self.cls_init),
            blocks: self.blocks.iter().map(|b| b.as_ref().map(|b| b.map(f))).collect(),
        }
    }

    pub fn visit<'a>(&'a self, f: &mut impl FnMut(String, &'a T)) {
        f("cls_init".into(), &self.cls_init);
        for (i, b) in self.blocks.iter().enumerate() {
            if let Some(b) = b {
                b.visit(&format!("layer{}", i + 1), f);
            }
        }
    }

    pub fn visit_mut(&mut self, f: &mut impl FnMut(&mut T)) {
        f(&mut self.cls_init);
        for b in self.blocks.iter_mut().flatten() {
            b.visit_mut(f);
        }
    }
}

/// Shape bookkeeping of one layer; produced both by the closed-form
/// [`shape_trace`] and by a real forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerTrace {
    /// 1-based layer id.
    pub layer: usize,
    /// Regions entering the layer.
    pub n_before: usize,
    /// Merged pairs in this layer.
    pub k: usize,
    /// Grid extent per region at layer input.
    pub grid: (usize, usize),
    pub channels: usize,
    /// Receptive field of a token at layer input.
    pub rf: (usize, usize),
    /// Flattened sequence length at layer input.
    pub tokens_in: usize,
    /// Sequence length after fusion and expansion.
    pub tokens_out: usize,
    /// Largest token count held at once while running the layer: the working
    /// sequence plus the rows of the one region being merged or expanded.
    pub peak_tokens: usize,
}

#[derive(Clone, Debug)]
pub struct SlideEmbedding {
    /// `[C_final]`.
    pub vector: Tensor,
    pub regions: usize,
    pub fusion: FusionSchedule,
    pub layers: Vec<LayerTrace>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: NetworkConfig,
    pub params: NetworkParams,
}

fn check_dims(cfg: &NetworkConfig, height: usize, width: usize) -> Result<Vec<(usize, usize)>> {
    window_origins(height, width, cfg.window)
}

/// Closed-form per-layer shapes for an `height x width` image; no tensor math.
pub fn shape_trace(cfg: &NetworkConfig, height: usize, width: usize) -> Result<Vec<LayerTrace>> {
    cfg.validate()?;
    let n0 = check_dims(cfg, height, width)?.len();
    let traj = cfg.trajectory();
    let counts = cfg.fusion_counts(n0)?;
    let mut grid = (cfg.window.h, cfg.window.w);
    let mut out = Vec::with_capacity(cfg.layers.len());
    for (i, layer) in cfg.layers.iter().enumerate() {
        let (n, k) = counts[i];
        let tokens_in = n * (grid.0 * grid.1 + 1);
        let after = match layer.te {
            Some(te) => te.out_dims(grid.0, grid.1)?,
            None => grid,
        };
        let tokens_out = (n - k) * (after.0 * after.1 + 1);
        let region = grid.0 * grid.1 + 1;
        let mut peak = tokens_in;
        if k > 0 {
            peak = peak.max(tokens_in + region);
        }
        if let Some(te) = layer.te {
            peak = peak.max((n - k) * region + expansion_transient(te, after));
        }
        out.push(LayerTrace {
            layer: i + 1,
            n_before: n,
            k,
            grid,
            channels: traj[i].channels,
            rf: traj[i].rf,
            tokens_in,
            tokens_out,
            peak_tokens: peak,
        });
        grid = after;
    }
    Ok(out)
}

/// Rows materialized while one region is expanded to `out` dims, before its
/// input grid is released: the averaged grid, or both halves plus their
/// concatenation and the widened CLS.
fn expansion_transient(te: ExpansionSpec, out: (usize, usize)) -> usize {
    let rows = out.0 * out.1;
    match te.mode {
        ExpandMode::Avg => rows,
        ExpandMode::Cat => 3 * rows + 1,
    }
}

/// Tokens per region and channel width after the last layer.
pub fn output_shape(cfg: &NetworkConfig) -> Result<((usize, usize), usize)> {
    let rf = cfg.downsampling();
    Ok(((cfg.window.h / rf.0, cfg.window.w / rf.1), cfg.final_channels()))
}

/// One region while it lives on a tape.
#[derive(Clone, Copy, Debug)]
struct RegionVar {
    /// `[gh * gw, C]` row-major.
    grid: Var,
    /// `[1, C]`.
    cls: Var,
    dims: (usize, usize),
    members: usize,
}

fn merge_plan(rows: usize, wa: f64, wb: f64) -> Arc<RowMix> {
    let mut plan = RowMix::with_capacity(rows);
    for r in 0..rows {
        plan.push_row(&[(0, r, wa), (1, r, wb)]);
    }
    Arc::new(plan)
}

/// Outputs of [`forward_on_tape`].
pub struct TapeForward {
    /// `[C_final]` slide embedding.
    pub embedding: Var,
    pub fusion: FusionSchedule,
    pub layers: Vec<LayerTrace>,
    pub regions: usize,
}

/// Records the full stack on `tape` for `image [H, W, C0]`.
pub fn forward_on_tape(
    tape: &mut Tape,
    cfg: &NetworkConfig,
    params: &NetworkParams<Var>,
    image: &Tensor,
) -> Result<TapeForward> {
    if image.rank() != 3 || image.shape()[2] != cfg.init_channels {
        return Err(Error::shape(
            "forward",
            format!("image must be [H, W, {}], got {:?}", cfg.init_channels, image.shape()),
        ));
    }
    if params.blocks.len() != cfg.layers.len() {
        return Err(Error::Invalid(format!(
            "model has {} blocks, config {} layers",
            params.blocks.len(),
            cfg.layers.len()
        )));
    }
    let (height, width, c0) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let ScanWindow { h: wh, w: ww } = cfg.window;
    let origins = check_dims(cfg, height, width)?;
    let cls0 = tape.reshape(params.cls_init, &[1, c0])?;

    let data = image.data();
    let mut regions: Vec<RegionVar> = origins
        .iter()
        .map(|&(r0, col0)| {
            let mut grid = Vec::with_capacity(wh * ww * c0);
            for r in r0..r0 + wh {
                let start = (r * width + col0) * c0;
                grid.extend_from_slice(&data[start..start + ww * c0]);
            }
            let grid = tape.constant(Tensor::from_parts(vec![wh * ww, c0], grid));
            RegionVar {
                grid,
                cls: cls0,
                dims: (wh, ww),
                members: 1,
            }
        })
        .collect();

    let traj = cfg.trajectory();
    let depth = cfg.layers.len();
    let mut fusion = FusionSchedule::new(cfg.alpha, depth)?;
    let mut layers = Vec::with_capacity(depth);
    for (li, layer) in cfg.layers.iter().enumerate() {
        let n = regions.len();
        let geometry: Vec<(usize, usize)> = regions.iter().map(|r| r.dims).collect();
        let tokens_in: usize = geometry.iter().map(|(h, w)| h * w + 1).sum();
        let mut peak = tokens_in;

        if let Some(block) = &params.blocks[li] {
            let (plan, _) = flatten_plan(&geometry);
            let sources: Vec<Var> = regions.iter().flat_map(|r| [r.grid, r.cls]).collect();
            let flat = tape.row_mix(&sources, Arc::new(plan))?;
            let flat = mamba_block_on_tape(tape, flat, block)?;
            for (r, (gp, cp)) in regions.iter_mut().zip(unflatten_plans(&geometry)) {
                r.grid = tape.row_mix(&[flat], Arc::new(gp))?;
                r.cls = tape.row_mix(&[flat], Arc::new(cp))?;
            }
            peak = peak.max(tape.shape(flat)[0]);
        }
        // token rows alive in the working sequence
        let mut live = tokens_in;

        let k = if layer.has_fusion {
            merge_count(n, cfg.alpha, depth)?
        } else {
            0
        };
        let mut record = FusionRecord {
            layer: li + 1,
            n_before: n,
            k,
            pairs: Vec::with_capacity(k),
        };
        if k > 0 {
            let cls: Vec<&Tensor> = regions.iter().map(|r| tape.value(r.cls)).collect();
            let pairs = plan_fusion(&cls, k)?;
            let g = n.div_ceil(2);
            record.pairs = pairs.iter().map(|p| (p.gallery, g + p.probe, p.similarity)).collect();
            let layout = fused_layout(n, &pairs);
            let mut next = Vec::with_capacity(layout.len());
            for (i, partner) in layout {
                let a = regions[i];
                let Some(j) = partner else {
                    next.push(a);
                    continue;
                };
                let b = regions[j];
                let (wa, wb) = cfg.weighting.weights(a.members, b.members);
                let rows = a.dims.0 * a.dims.1;
                peak = peak.max(live + rows + 1);
                live -= rows + 1;
                next.push(RegionVar {
                    grid: tape.row_mix(&[a.grid, b.grid], merge_plan(rows, wa, wb))?,
                    cls: tape.row_mix(&[a.cls, b.cls], merge_plan(1, wa, wb))?,
                    dims: a.dims,
                    members: a.members + b.members,
                });
            }
            regions = next;
        }
        fusion.trace.push(record);

        if let Some(te) = layer.te {
            // all regions share one geometry, so one plan serves them all
            let (gh, gw) = regions[0].dims;
            let dims = te.out_dims(gh, gw)?;
            let plan = expansion_plan(gh, gw, te, cfg.pad)?;
            let (first, second) = match plan {
                ExpansionPlan::Avg(p) => (Arc::new(p), None),
                ExpansionPlan::Cat(p, q) => (Arc::new(p), Some(Arc::new(q))),
            };
            let transient = expansion_transient(te, dims);
            for r in regions.iter_mut() {
                peak = peak.max(live + transient);
                live = live - (gh * gw + 1) + dims.0 * dims.1 + 1;
                let a = tape.row_mix(&[r.grid], first.clone())?;
                match &second {
                    None => r.grid = a,
                    Some(q) => {
                        let b = tape.row_mix(&[r.grid], q.clone())?;
                        r.grid = tape.concat_cols(&[a, b])?;
                        r.cls = tape.concat_cols(&[r.cls, r.cls])?;
                    }
                }
                r.dims = dims;
            }
        }

        let tokens_out: usize = regions.iter().map(|r| r.dims.0 * r.dims.1 + 1).sum();
        debug_assert_eq!(live, tokens_out);
        layers.push(LayerTrace {
            layer: li + 1,
            n_before: n,
            k,
            grid: geometry[0],
            channels: traj[li].channels,
            rf: traj[li].rf,
            tokens_in,
            tokens_out,
            peak_tokens: peak,
        });
    }

    let n = regions.len();
    let mut mean = RowMix::with_capacity(1);
    let terms: Vec<(usize, usize, f64)> = (0..n).map(|i| (i, 0, 1.0 / n as f64)).collect();
    mean.push_row(&terms);
    let cls: Vec<Var> = regions.iter().map(|r| r.cls).collect();
    let pooled = tape.row_mix(&cls, Arc::new(mean))?;
    let c = tape.shape(pooled)[1];
    let embedding = tape.reshape(pooled, &[c])?;
    Ok(TapeForward {
        embedding,
        fusion,
        layers,
        regions: n,
    })
}

impl Model {
    pub fn build(config: NetworkConfig, rng: &mut Rng) -> Result<Model> {
        config.validate()?;
        let traj = config.trajectory();
        let cls_init = Tensor::randn(&[config.init_channels], 0.02, rng);
        let blocks = config
            .layers
            .iter()
            .zip(&traj)
            .map(|(l, s)| l.has_mamba.then(|| MambaBlockParams::init(s.channels, &config.mamba, rng)))
            .collect();
        Ok(Model {
            config,
            params: NetworkParams { cls_init, blocks },
        })
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.params.visit(&mut |_, t: &Tensor| n += t.len());
        n
    }

    pub fn embedding_dim(&self) -> usize {
        self.config.final_channels()
    }

    pub fn forward(&self, image: &Tensor) -> Result<SlideEmbedding> {
        let mut tape = Tape::new();
        let pv = self.params.map(&mut |t: &Tensor| tape.constant(t.clone()));
        let out = forward_on_tape(&mut tape, &self.config, &pv, image)?;
        tape.check_finite()?;
        Ok(SlideEmbedding {
            vector: tape.value(out.embedding).clone(),
            regions: out.regions,
            fusion: out.fusion,
            layers: out.layers,
        })
    }
}
