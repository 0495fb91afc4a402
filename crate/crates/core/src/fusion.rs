//! Region fusion: merge the most CLS-similar gallery/probe region pairs.

use crate::error::{Error, Result};
use crate::serialization::Region;
use crate::tensor::Tensor;

const NORM_GUARD: f64 = 1e-12;

/// `k = ceil(alpha * n / layers)` for `n >= 2`, clamped to the probe size.
pub fn merge_count(n: usize, alpha: f64, layers: usize) -> Result<usize> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    if layers == 0 {
        return Err(Error::Invalid("layer count must be positive".into()));
    }
    if n < 2 {
        return Ok(0);
    }
    // the guard keeps exact integers such as 0.8 * 60 / 24 from rounding up
    let k = (alpha * n as f64 / layers as f64 - 1e-9).ceil() as usize;
    Ok(k.min(n / 2))
}

/// Gallery gets the first `ceil(n/2)` regions in sequence order.
pub fn split_gallery_probe<T>(regions: &[T]) -> (&[T], &[T]) {
    regions.split_at(regions.len().div_ceil(2))
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let denom = na * nb;
    if denom < NORM_GUARD {
        0.0
    } else {
        (dot / denom).clamp(-1.0, 1.0)
    }
}

/// Cosine similarities `[gallery, probe]` between CLS tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityMatrix {
    pub values: Tensor,
}

impl SimilarityMatrix {
    pub fn gallery(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn probe(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn get(&self, g: usize, p: usize) -> f64 {
        self.values.data()[g * self.probe() + p]
    }
}

pub fn cls_similarity(gallery: &[&Tensor], probe: &[&Tensor]) -> Result<SimilarityMatrix> {
    if gallery.is_empty() || probe.is_empty() {
        return Err(Error::Invalid("similarity needs non-empty gallery and probe".into()));
    }
    let mut values = Vec::with_capacity(gallery.len() * probe.len());
    for g in gallery {
        for p in probe {
            if g.len() != p.len() {
                return Err(Error::shape("cls_similarity", "CLS widths differ"));
            }
            values.push(cosine(g.data(), p.data()));
        }
    }
    Ok(SimilarityMatrix {
        values: Tensor::from_parts(vec![gallery.len(), probe.len()], values),
    })
}

/// One fused pair, indices relative to the gallery and probe sets.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MergedPair {
    pub gallery: usize,
    pub probe: usize,
    pub similarity: f64,
}

/// Greedy one-to-one Top-k: repeatedly take the best remaining cell and
/// retire its row and column. Ties go to the smaller gallery index, then the
/// smaller probe index.
pub fn select_pairs(sim: &SimilarityMatrix, k: usize) -> Result<Vec<MergedPair>> {
    let (g, p) = (sim.gallery(), sim.probe());
    if k > g.min(p) {
        return Err(Error::Invalid(format!("cannot select {k} pairs from a {g}x{p} matrix")));
    }
    let mut cells: Vec<(usize, usize)> = (0..g).flat_map(|i| (0..p).map(move |j| (i, j))).collect();
    cells.sort_by(|&(ai, aj), &(bi, bj)| {
        sim.get(bi, bj)
            .total_cmp(&sim.get(ai, aj))
            .then(ai.cmp(&bi))
            .then(aj.cmp(&bj))
    });
    let mut used_g = vec![false; g];
    let mut used_p = vec![false; p];
    let mut out = Vec::with_capacity(k);
    for (i, j) in cells {
        if out.len() == k {
            break;
        }
        if used_g[i] || used_p[j] {
            continue;
        }
        used_g[i] = true;
        used_p[j] = true;
        out.push(MergedPair {
            gallery: i,
            probe: j,
            similarity: sim.get(i, j),
        });
    }
    Ok(out)
}

/// How two regions are averaged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MergeWeighting {
    /// Weight each side by its `members` count, so a fused region stays the
    /// mean of all windows it absorbed.
    #[default]
    Members,
    /// Plain 1/2 + 1/2 average.
    Equal,
}

impl MergeWeighting {
    pub fn weights(self, gallery_members: usize, probe_members: usize) -> (f64, f64) {
        match self {
            MergeWeighting::Members => {
                let total = (gallery_members + probe_members) as f64;
                (gallery_members as f64 / total, probe_members as f64 / total)
            }
            MergeWeighting::Equal => (0.5, 0.5),
        }
    }
}

/// Pairs to fuse for regions with the given CLS vectors.
pub fn plan_fusion(cls: &[&Tensor], k: usize) -> Result<Vec<MergedPair>> {
    if k == 0 {
        return Ok(Vec::new());
    }
    if k > cls.len() / 2 {
        return Err(Error::Invalid(format!(
            "cannot merge {k} pairs among {} regions",
            cls.len()
        )));
    }
    let (gallery, probe) = split_gallery_probe(cls);
    let sim = cls_similarity(gallery, probe)?;
    select_pairs(&sim, k)
}

/// Region slots after fusion: for each output region, the source region index
/// and, if it absorbed a probe region, that probe's absolute index.
pub fn fused_layout(n: usize, pairs: &[MergedPair]) -> Vec<(usize, Option<usize>)> {
    let g = n.div_ceil(2);
    let mut partner = vec![None; n];
    let mut removed = vec![false; n];
    for pair in pairs {
        partner[pair.gallery] = Some(g + pair.probe);
        removed[g + pair.probe] = true;
    }
    (0..n)
        .filter(|&i| !removed[i])
        .map(|i| (i, partner[i]))
        .collect()
}

/// Fuses the Top-k most similar gallery/probe pairs. Merged regions keep the
/// gallery slot; probe slots are dropped.
pub fn fuse_topk(
    regions: &[Region],
    k: usize,
    weighting: MergeWeighting,
) -> Result<(Vec<Region>, Vec<MergedPair>)> {
    let cls: Vec<&Tensor> = regions.iter().map(|r| &r.cls).collect();
    let pairs = plan_fusion(&cls, k)?;
    let out = fused_layout(regions.len(), &pairs)
        .into_iter()
        .map(|(i, partner)| match partner {
            None => Ok(regions[i].clone()),
            Some(j) => merge_regions(&regions[i], &regions[j], weighting),
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((out, pairs))
}

fn merge_regions(a: &Region, b: &Region, weighting: MergeWeighting) -> Result<Region> {
    if a.grid.shape() != b.grid.shape() || a.cls.shape() != b.cls.shape() {
        return Err(Error::shape(
            "fuse_topk",
            format!("regions {:?} and {:?} differ", a.grid.shape(), b.grid.shape()),
        ));
    }
    let (wa, wb) = weighting.weights(a.members, b.members);
    let mix = |x: &Tensor, y: &Tensor| {
        let data = x.data().iter().zip(y.data()).map(|(u, v)| wa * u + wb * v).collect();
        Tensor::from_parts(x.shape().to_vec(), data)
    };
    Ok(Region {
        grid: mix(&a.grid, &b.grid),
        cls: mix(&a.cls, &b.cls),
        origin: a.origin,
        members: a.members + b.members,
    })
}

/// Per-layer fusion bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionRecord {
    pub layer: usize,
    pub n_before: usize,
    pub k: usize,
    /// Absolute region indices `(gallery, probe)` and their similarity.
    pub pairs: Vec<(usize, usize, f64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusionSchedule {
    pub alpha: f64,
    pub layers: usize,
    pub trace: Vec<FusionRecord>,
}

impl FusionSchedule {
    pub fn new(alpha: f64, layers: usize) -> Result<Self> {
        merge_count(2, alpha, layers.max(1))?;
        Ok(FusionSchedule {
            alpha,
            layers,
            trace: Vec::new(),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("layer,n_before,k,gallery,probe,similarity\n");
        for r in &self.trace {
            if r.pairs.is_empty() {
                s.push_str(&format!("{},{},{},,,\n", r.layer, r.n_before, r.k));
            }
            for (g, p, sim) in &r.pairs {
                s.push_str(&format!("{},{},{},{g},{p},{sim}\n", r.layer, r.n_before, r.k));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn region(v: f64, cls: Vec<f64>) -> Region {
        Region {
            grid: Tensor::full(&[1, 1, 1], v),
            cls: Tensor::vector(cls),
            origin: (0, 0),
            members: 1,
        }
    }

    #[test]
    fn split_rules() {
        let r: Vec<usize> = (0..4).collect();
        assert_eq!(split_gallery_probe(&r), (&[0, 1][..], &[2, 3][..]));
        let r: Vec<usize> = (0..5).collect();
        let (g, p) = split_gallery_probe(&r);
        assert_eq!((g.len(), p.len()), (3, 2));
        let r = [7, 8];
        assert_eq!(split_gallery_probe(&r), (&[7][..], &[8][..]));
    }

    #[test]
    fn similarity_examples() {
        let a = Tensor::vector(vec![1.0, 0.0]);
        let b = Tensor::vector(vec![0.0, 1.0]);
        let c = Tensor::vector(vec![1.0, 1.0]);
        let s = cls_similarity(&[&a], &[&a, &b, &c]).unwrap();
        assert_eq!(s.get(0, 0), 1.0);
        assert_eq!(s.get(0, 1), 0.0);
        assert!((s.get(0, 2) - 0.7071067811865475).abs() < 1e-12);
        let z = Tensor::vector(vec![0.0, 0.0]);
        assert_eq!(cls_similarity(&[&z], &[&a]).unwrap().get(0, 0), 0.0);
    }

    #[test]
    fn merge_count_examples() {
        assert_eq!(merge_count(60, 0.8, 24).unwrap(), 2);
        assert_eq!(merge_count(24, 0.8, 24).unwrap(), 1);
        assert_eq!(merge_count(1, 0.8, 24).unwrap(), 0);
        assert_eq!(merge_count(2, 0.99, 1).unwrap(), 1);
        assert!(merge_count(4, 1.0, 24).is_err());
        assert!(merge_count(4, 0.0, 24).is_err());
    }

    #[test]
    fn identical_regions_merge_to_themselves() {
        let r = region(3.0, vec![1.0, 2.0]);
        let (out, pairs) = fuse_topk(&[r.clone(), r.clone()], 1, MergeWeighting::Members).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].grid, r.grid);
        assert_eq!(out[0].cls, r.cls);
        assert_eq!(out[0].members, 2);
        assert!((pairs[0].similarity - 1.0).abs() < 1e-12);
    }

    #[test]
    fn merge_averages_grids() {
        let a = region(1.0, vec![1.0]);
        let b = region(3.0, vec![1.0]);
        let (out, _) = fuse_topk(&[a, b], 1, MergeWeighting::Members).unwrap();
        assert_eq!(out[0].grid.data(), &[2.0]);
    }

    #[test]
    fn zero_k_is_noop() {
        let rs: Vec<Region> = (0..4).map(|i| region(i as f64, vec![1.0, i as f64])).collect();
        let (out, pairs) = fuse_topk(&rs, 0, MergeWeighting::Members).unwrap();
        assert_eq!(out, rs);
        assert!(pairs.is_empty());
        assert!(fuse_topk(&rs, 3, MergeWeighting::Members).is_err());
    }

    #[test]
    fn greedy_is_one_to_one_and_keeps_gallery_slot() {
        // gallery cls: [1,0], [0,1]; probe cls: [0,1], [1,0.1]
        let rs = vec![
            region(0.0, vec![1.0, 0.0]),
            region(1.0, vec![0.0, 1.0]),
            region(2.0, vec![0.0, 1.0]),
            region(3.0, vec![1.0, 0.1]),
        ];
        let (out, pairs) = fuse_topk(&rs, 2, MergeWeighting::Members).unwrap();
        assert_eq!(pairs.len(), 2);
        assert_eq!((pairs[0].gallery, pairs[0].probe), (1, 0));
        assert_eq!((pairs[1].gallery, pairs[1].probe), (0, 1));
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].grid.data(), &[1.5]);
        assert_eq!(out[1].grid.data(), &[1.5]);
    }

    #[test]
    fn ties_prefer_low_indices() {
        let rs: Vec<Region> = (0..4).map(|i| region(i as f64, vec![1.0])).collect();
        let (_, pairs) = fuse_topk(&rs, 1, MergeWeighting::Members).unwrap();
        assert_eq!((pairs[0].gallery, pairs[0].probe), (0, 0));
    }

    #[test]
    fn weighted_vs_equal() {
        let mut a = region(0.0, vec![1.0]);
        a.members = 3;
        let b = region(4.0, vec![1.0]);
        let (w, _) = fuse_topk(&[a.clone(), b.clone()], 1, MergeWeighting::Members).unwrap();
        assert_eq!(w[0].grid.data(), &[1.0]);
        assert_eq!(w[0].members, 4);
        let (e, _) = fuse_topk(&[a, b], 1, MergeWeighting::Equal).unwrap();
        assert_eq!(e[0].grid.data(), &[2.0]);
    }

    #[test]
    fn layout_drops_probes() {
        let pairs = [MergedPair { gallery: 2, probe: 0, similarity: 1.0 }];
        assert_eq!(
            fused_layout(5, &pairs),
            vec![(0, None), (1, None), (2, Some(3)), (4, None)]
        );
    }
}
