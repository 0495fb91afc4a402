//! Raster to region-structured token sequence.
//!
//! The image is tiled into scan windows. Windows are visited in serpentine
//! order over the window grid, pixels inside a window in serpentine order,
//! and each window's local sequence carries one CLS token spliced in at index
//! `floor(tokens / 2)`.

use crate::error::{Error, Result};
use crate::ops::RowMix;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScanWindow {
    pub h: usize,
    pub w: usize,
}

impl ScanWindow {
    pub fn new(h: usize, w: usize) -> Result<Self> {
        if h == 0 || w == 0 {
            return Err(Error::Invalid(format!("scan window {h}x{w} must be non-empty")));
        }
        Ok(ScanWindow { h, w })
    }

    pub fn square(side: usize) -> Result<Self> {
        ScanWindow::new(side, side)
    }
}

/// One scan window (or a fusion of several) at the current resolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Region {
    /// `[grid_h, grid_w, C]` spatial tokens, row-major.
    pub grid: Tensor,
    /// `[C]`
    pub cls: Tensor,
    /// Top-left pixel of the source window.
    pub origin: (usize, usize),
    /// Number of source windows averaged into this region.
    pub members: usize,
}

impl Region {
    pub fn grid_dims(&self) -> (usize, usize) {
        (self.grid.shape()[0], self.grid.shape()[1])
    }

    pub fn tokens(&self) -> usize {
        let (h, w) = self.grid_dims();
        h * w + 1
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub regions: Vec<Region>,
    pub channels: usize,
    /// Receptive field of one spatial token, `(rows, cols)` in pixels.
    pub rf: (usize, usize),
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.regions.iter().map(Region::tokens).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.regions.is_empty()
    }

    pub fn geometry(&self) -> Vec<(usize, usize)> {
        self.regions.iter().map(Region::grid_dims).collect()
    }
}

/// Serpentine scan: even rows left to right, odd rows right to left.
pub fn zigzag_order(h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::with_capacity(h * w);
    for r in 0..h {
        if r % 2 == 0 {
            out.extend((0..w).map(|c| (r, c)));
        } else {
            out.extend((0..w).rev().map(|c| (r, c)));
        }
    }
    out
}

/// Local index of the CLS token in a region holding `spatial` grid tokens.
pub fn cls_local_index(spatial: usize) -> usize {
    spatial / 2
}

/// Top-left pixel of every window, in visiting order.
pub fn window_origins(height: usize, width: usize, window: ScanWindow) -> Result<Vec<(usize, usize)>> {
    if !height.is_multiple_of(window.h) || !width.is_multiple_of(window.w) {
        return Err(Error::Invalid(format!(
            "image {height}x{width} does not tile into {}x{} windows",
            window.h, window.w
        )));
    }
    Ok(zigzag_order(height / window.h, width / window.w)
        .into_iter()
        .map(|(r, c)| (r * window.h, c * window.w))
        .collect())
}

pub fn serialize(image: &Tensor, window: ScanWindow, cls_init: &Tensor) -> Result<TokenSequence> {
    if image.rank() != 3 {
        return Err(Error::shape("serialize", format!("image must be [H, W, C], got {:?}", image.shape())));
    }
    let (height, width, c) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    if cls_init.len() != c {
        return Err(Error::shape(
            "serialize",
            format!("cls has {} channels, image {c}", cls_init.len()),
        ));
    }
    let origins = window_origins(height, width, window)?;
    let data = image.data();
    let regions = origins
        .into_iter()
        .map(|(r0, c0)| {
            let mut grid = Vec::with_capacity(window.h * window.w * c);
            for r in r0..r0 + window.h {
                let start = (r * width + c0) * c;
                grid.extend_from_slice(&data[start..start + window.w * c]);
            }
            Region {
                grid: Tensor::from_parts(vec![window.h, window.w, c], grid),
                cls: Tensor::from_parts(vec![c], cls_init.data().to_vec()),
                origin: (r0, c0),
                members: 1,
            }
        })
        .collect();
    Ok(TokenSequence {
        regions,
        channels: c,
        rf: (1, 1),
    })
}

/// Position of one entry of a region's local sequence.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LocalSlot {
    /// Row-major index into the grid.
    Spatial(usize),
    Cls,
}

/// Local sequence of a `gh x gw` region: serpentine grid order with the CLS
/// token spliced in at the centre.
pub fn local_sequence(gh: usize, gw: usize) -> Vec<LocalSlot> {
    let order = zigzag_order(gh, gw);
    let ci = cls_local_index(order.len());
    let mut out = Vec::with_capacity(order.len() + 1);
    for (k, (r, c)) in order.into_iter().enumerate() {
        if k == ci {
            out.push(LocalSlot::Cls);
        }
        out.push(LocalSlot::Spatial(r * gw + c));
    }
    out
}

/// Gather plan for flattening regions of the given grid sizes.
///
/// Sources are ordered `[grid_0, cls_0, grid_1, cls_1, ...]` with each grid
/// viewed as `[gh * gw, C]`. Also returns the flat CLS positions.
pub fn flatten_plan(geometry: &[(usize, usize)]) -> (RowMix, Vec<usize>) {
    let total: usize = geometry.iter().map(|(h, w)| h * w + 1).sum();
    let mut plan = RowMix::with_capacity(total);
    let mut cls_positions = Vec::with_capacity(geometry.len());
    for (i, &(gh, gw)) in geometry.iter().enumerate() {
        for slot in local_sequence(gh, gw) {
            match slot {
                LocalSlot::Spatial(k) => plan.push_copy(2 * i, k),
                LocalSlot::Cls => {
                    cls_positions.push(plan.out_rows());
                    plan.push_copy(2 * i + 1, 0);
                }
            }
        }
    }
    (plan, cls_positions)
}

/// Per-region `(grid, cls)` gather plans reading from one flat `[M, C]` source.
pub fn unflatten_plans(geometry: &[(usize, usize)]) -> Vec<(RowMix, RowMix)> {
    let mut offset = 0;
    geometry
        .iter()
        .map(|&(gh, gw)| {
            let local = local_sequence(gh, gw);
            let mut pos = vec![0; gh * gw];
            let mut cls = RowMix::new();
            for (k, slot) in local.iter().enumerate() {
                match slot {
                    LocalSlot::Spatial(s) => pos[*s] = offset + k,
                    LocalSlot::Cls => cls.push_copy(0, offset + k),
                }
            }
            let mut grid = RowMix::with_capacity(gh * gw);
            for p in pos {
                grid.push_copy(0, p);
            }
            offset += local.len();
            (grid, cls)
        })
        .collect()
}

/// Flat `[M, C]` sequence and the CLS positions within it.
pub fn flatten(seq: &TokenSequence) -> Result<(Tensor, Vec<usize>)> {
    let (plan, cls_positions) = flatten_plan(&seq.geometry());
    let sources: Vec<&Tensor> = seq.regions.iter().flat_map(|r| [&r.grid, &r.cls]).collect();
    Ok((plan.apply(&sources)?, cls_positions))
}

/// Inverse of [`flatten`], taking geometry and bookkeeping from `template`.
pub fn unflatten(flat: &Tensor, template: &TokenSequence) -> Result<TokenSequence> {
    if flat.rank() != 2 || flat.shape()[0] != template.len() || flat.cols() != template.channels {
        return Err(Error::shape(
            "unflatten",
            format!(
                "flat {:?} for {} tokens of {} channels",
                flat.shape(),
                template.len(),
                template.channels
            ),
        ));
    }
    let c = template.channels;
    let regions = unflatten_plans(&template.geometry())
        .into_iter()
        .zip(&template.regions)
        .map(|((gp, cp), r)| {
            let (gh, gw) = r.grid_dims();
            Ok(Region {
                grid: gp.apply(&[flat])?.reshape(&[gh, gw, c])?,
                cls: cp.apply(&[flat])?.reshape(&[c])?,
                origin: r.origin,
                members: r.members,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TokenSequence {
        regions,
        channels: c,
        rf: template.rf,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TokenCoord {
    /// Top-left pixel of the token's receptive field.
    Pixel { row: usize, col: usize },
    Cls { region: usize },
}

/// Maps a flat sequence index back to the image.
pub fn coords_of(seq: &TokenSequence, flat_index: usize) -> Result<TokenCoord> {
    let mut offset = 0;
    for (i, region) in seq.regions.iter().enumerate() {
        let n = region.tokens();
        if flat_index < offset + n {
            let (gh, gw) = region.grid_dims();
            return Ok(match local_sequence(gh, gw)[flat_index - offset] {
                LocalSlot::Cls => TokenCoord::Cls { region: i },
                LocalSlot::Spatial(k) => TokenCoord::Pixel {
                    row: region.origin.0 + (k / gw) * seq.rf.0,
                    col: region.origin.1 + (k % gw) * seq.rf.1,
                },
            });
        }
        offset += n;
    }
    Err(Error::OutOfRange {
        index: flat_index,
        len: offset,
    })
}
