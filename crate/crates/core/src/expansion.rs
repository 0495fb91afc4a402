//! Token expansion: shift-merge along one axis, then fuse adjacent token
//! pairs by channel concatenation or averaging.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::ops::RowMix;
use crate::serialization::{Region, TokenSequence};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Along rows (`h` halves).
    Vertical,
    /// Along columns (`w` halves).
    Horizontal,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExpandMode {
    Cat,
    Avg,
}

/// Fill used for the first row/column when shifting.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum PadMode {
    #[default]
    Replicate,
    Zero,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ExpansionSpec {
    pub axis: Axis,
    pub mode: ExpandMode,
}

impl ExpansionSpec {
    pub fn new(axis: Axis, mode: ExpandMode) -> Self {
        ExpansionSpec { axis, mode }
    }

    pub fn out_dims(&self, gh: usize, gw: usize) -> Result<(usize, usize)> {
        let extent = match self.axis {
            Axis::Vertical => gh,
            Axis::Horizontal => gw,
        };
        if extent % 2 != 0 {
            return Err(Error::Invalid(format!(
                "{:?} expansion needs an even extent, grid is {gh}x{gw}",
                self.axis
            )));
        }
        Ok(match self.axis {
            Axis::Vertical => (gh / 2, gw),
            Axis::Horizontal => (gh, gw / 2),
        })
    }

    pub fn out_channels(&self, c: usize) -> usize {
        match self.mode {
            ExpandMode::Cat => 2 * c,
            ExpandMode::Avg => c,
        }
    }

    pub fn grow_rf(&self, rf: (usize, usize)) -> (usize, usize) {
        match self.axis {
            Axis::Vertical => (rf.0 * 2, rf.1),
            Axis::Horizontal => (rf.0, rf.1 * 2),
        }
    }
}

impl fmt::Display for ExpansionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = match self.axis {
            Axis::Vertical => "v",
            Axis::Horizontal => "h",
        };
        let m = match self.mode {
            ExpandMode::Cat => "cat",
            ExpandMode::Avg => "avg",
        };
        write!(f, "{a}:{m}")
    }
}

impl FromStr for ExpansionSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (a, m) = s
            .split_once(':')
            .ok_or_else(|| Error::Invalid(format!("expansion '{s}' is not axis:mode")))?;
        let axis = match a {
            "h" => Axis::Horizontal,
            "v" => Axis::Vertical,
            _ => return Err(Error::Invalid(format!("unknown expansion axis '{a}'"))),
        };
        let mode = match m {
            "cat" => ExpandMode::Cat,
            "avg" => ExpandMode::Avg,
            _ => return Err(Error::Invalid(format!("unknown expansion mode '{m}'"))),
        };
        Ok(ExpansionSpec { axis, mode })
    }
}

/// Row-major index of grid cell `(i, j)` in a `gh x gw` grid.
fn cell(gw: usize, i: usize, j: usize) -> usize {
    i * gw + j
}

/// Shift-merge as a gather plan over a `[gh * gw, C]` grid.
pub fn shift_merge_plan(gh: usize, gw: usize, axis: Axis, pad: PadMode) -> RowMix {
    let mut plan = RowMix::with_capacity(gh * gw);
    for i in 0..gh {
        for j in 0..gw {
            let here = cell(gw, i, j);
            let prev = match axis {
                Axis::Vertical => i.checked_sub(1).map(|p| cell(gw, p, j)),
                Axis::Horizontal => j.checked_sub(1).map(|p| cell(gw, i, p)),
            };
            match (prev, pad) {
                (Some(p), _) => plan.push_row(&[(0, here, 0.5), (0, p, 0.5)]),
                (None, PadMode::Replicate) => plan.push_copy(0, here),
                (None, PadMode::Zero) => plan.push_row(&[(0, here, 0.5)]),
            }
        }
    }
    plan
}

/// `outer ∘ inner` for single-source plans, merging repeated rows.
fn compose(outer: &RowMix, inner: &RowMix) -> RowMix {
    let mut out = RowMix::with_capacity(outer.out_rows());
    for r in 0..outer.out_rows() {
        let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
        for t in outer.row_terms(r) {
            for u in inner.row_terms(t.row as usize) {
                *acc.entry(u.row as usize).or_insert(0.0) += t.weight * u.weight;
            }
        }
        let terms: Vec<(usize, usize, f64)> = acc.into_iter().map(|(row, w)| (0, row, w)).collect();
        out.push_row(&terms);
    }
    out
}

/// Gather plans realizing one expansion of a `gh x gw` grid.
#[derive(Clone, Debug)]
pub enum ExpansionPlan {
    /// One plan producing the averaged pairs.
    Avg(RowMix),
    /// First and second member of each pair, to be concatenated on channels.
    Cat(RowMix, RowMix),
}

pub fn expansion_plan(gh: usize, gw: usize, spec: ExpansionSpec, pad: PadMode) -> Result<ExpansionPlan> {
    let (oh, ow) = spec.out_dims(gh, gw)?;
    let shift = shift_merge_plan(gh, gw, spec.axis, pad);
    let pair = |i: usize, j: usize| match spec.axis {
        Axis::Vertical => (cell(gw, 2 * i, j), cell(gw, 2 * i + 1, j)),
        Axis::Horizontal => (cell(gw, i, 2 * j), cell(gw, i, 2 * j + 1)),
    };
    let mut first = RowMix::with_capacity(oh * ow);
    let mut second = RowMix::with_capacity(oh * ow);
    let mut avg = RowMix::with_capacity(oh * ow);
    for i in 0..oh {
        for j in 0..ow {
            let (a, b) = pair(i, j);
            first.push_copy(0, a);
            second.push_copy(0, b);
            avg.push_row(&[(0, a, 0.5), (0, b, 0.5)]);
        }
    }
    Ok(match spec.mode {
        ExpandMode::Avg => ExpansionPlan::Avg(compose(&avg, &shift)),
        ExpandMode::Cat => ExpansionPlan::Cat(compose(&first, &shift), compose(&second, &shift)),
    })
}

/// Shift-merged copy of `grid [h, w, C]`.
pub fn shift_merge(grid: &Tensor, axis: Axis, pad: PadMode) -> Result<Tensor> {
    if grid.rank() != 3 {
        return Err(Error::shape("shift_merge", format!("expected [h, w, C], got {:?}", grid.shape())));
    }
    let (gh, gw) = (grid.shape()[0], grid.shape()[1]);
    shift_merge_plan(gh, gw, axis, pad)
        .apply(&[grid])?
        .reshape(grid.shape())
}

fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    let (ca, cb) = (a.cols(), b.cols());
    let mut data = Vec::with_capacity(a.len() + b.len());
    for r in 0..a.rows() {
        data.extend_from_slice(a.row(r));
        data.extend_from_slice(b.row(r));
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = ca + cb;
    Tensor::from_parts(shape, data)
}

/// Expands one region. Under `Cat` the CLS token is duplicated to `[v; v]`;
/// under `Avg` it passes through.
pub fn expand(region: &Region, spec: ExpansionSpec, pad: PadMode) -> Result<Region> {
    let (gh, gw) = region.grid_dims();
    let (oh, ow) = spec.out_dims(gh, gw)?;
    let c = region.grid.cols();
    let (grid, cls) = match expansion_plan(gh, gw, spec, pad)? {
        ExpansionPlan::Avg(p) => (p.apply(&[&region.grid])?.reshape(&[oh, ow, c])?, region.cls.clone()),
        ExpansionPlan::Cat(p, q) => {
            let a = p.apply(&[&region.grid])?;
            let b = q.apply(&[&region.grid])?;
            (
                concat_channels(&a, &b).reshape(&[oh, ow, 2 * c])?,
                concat_channels(&region.cls, &region.cls),
            )
        }
    };
    Ok(Region {
        grid,
        cls,
        origin: region.origin,
        members: region.members,
    })
}

pub fn expand_horizontal(region: &Region, mode: ExpandMode, pad: PadMode) -> Result<Region> {
    expand(region, ExpansionSpec::new(Axis::Horizontal, mode), pad)
}

pub fn expand_vertical(region: &Region, mode: ExpandMode, pad: PadMode) -> Result<Region> {
    expand(region, ExpansionSpec::new(Axis::Vertical, mode), pad)
}

/// Expands every region and grows the sequence's receptive field.
pub fn expand_sequence(seq: &TokenSequence, spec: ExpansionSpec, pad: PadMode) -> Result<TokenSequence> {
    let regions = seq
        .regions
        .iter()
        .map(|r| expand(r, spec, pad))
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenSequence {
        regions,
        channels: spec.out_channels(seq.channels),
        rf: spec.grow_rf(seq.rf),
    })
}
