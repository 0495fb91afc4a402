mod common;

use std::collections::HashSet;

use proptest::prelude::*;

use common::brute_c_index;
use pixel_mamba::config::NetworkConfig;
use pixel_mamba::expansion::{expand, Axis, ExpandMode, ExpansionSpec, PadMode};
use pixel_mamba::fusion::{cls_similarity, fuse_topk, merge_count, select_pairs, MergeWeighting};
use pixel_mamba::heads::{hazard_to_survival, hazards, survival_nll};
use pixel_mamba::metrics::{c_index, km_curve, macro_f1};
use pixel_mamba::serialization::{coords_of, flatten, serialize, unflatten, zigzag_order, Region, ScanWindow, TokenCoord};
use pixel_mamba::synth::kfold;
use pixel_mamba::tensor::{read_tensor, write_tensor, DType};
use pixel_mamba::{Rng, SurvivalRecord, Tensor};

fn image(h: usize, w: usize, seed: u64) -> Tensor {
    Tensor::uniform(&[h, w, 3], 0.0, 1.0, &mut Rng::new(seed))
}

fn region(gh: usize, gw: usize, c: usize, members: usize, rng: &mut Rng) -> Region {
    Region {
        grid: Tensor::uniform(&[gh, gw, c], -1.0, 1.0, rng),
        cls: Tensor::uniform(&[c], -1.0, 1.0, rng),
        origin: (0, 0),
        members,
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn serialization_is_a_bijection(
        wh in 1usize..6, ww in 1usize..6, rows in 1usize..4, cols in 1usize..4, seed in any::<u64>()
    ) {
        let (h, w) = (wh * rows, ww * cols);
        let img = image(h, w, seed);
        let seq = serialize(&img, ScanWindow::new(wh, ww).unwrap(), &Tensor::zeros(&[3])).unwrap();
        let n = rows * cols;
        prop_assert_eq!(seq.len(), h * w + n);

        let mut pixels = HashSet::new();
        let mut cls = HashSet::new();
        for i in 0..seq.len() {
            match coords_of(&seq, i).unwrap() {
                TokenCoord::Pixel { row, col } => prop_assert!(pixels.insert((row, col))),
                TokenCoord::Cls { region } => prop_assert!(cls.insert(region)),
            }
        }
        prop_assert_eq!(pixels.len(), h * w);
        prop_assert_eq!(cls.len(), n);
        prop_assert!(coords_of(&seq, seq.len()).is_err());

        // consecutive spatial tokens of one window are grid neighbours
        let mut prev: Option<(usize, usize, usize)> = None;
        for i in 0..seq.len() {
            match coords_of(&seq, i).unwrap() {
                TokenCoord::Cls { .. } => {}
                TokenCoord::Pixel { row, col } => {
                    let r = row / wh * cols + col / ww;
                    if let Some((pr, pc, preg)) = prev {
                        if preg == r {
                            prop_assert_eq!(pr.abs_diff(row) + pc.abs_diff(col), 1);
                        }
                    }
                    prev = Some((row, col, r));
                }
            }
        }

        let (flat, _) = flatten(&seq).unwrap();
        prop_assert_eq!(unflatten(&flat, &seq).unwrap(), seq);
    }

    #[test]
    fn serpentine_order_steps_by_one(h in 1usize..12, w in 1usize..12) {
        let order = zigzag_order(h, w);
        prop_assert_eq!(order.len(), h * w);
        for pair in order.windows(2) {
            prop_assert_eq!(pair[0].0.abs_diff(pair[1].0) + pair[0].1.abs_diff(pair[1].1), 1);
        }
    }

    #[test]
    fn merge_count_stays_within_probe_set(n in 0usize..500, tenths in 1usize..10, layers in 1usize..40) {
        let alpha = tenths as f64 / 10.0;
        let k = merge_count(n, alpha, layers).unwrap();
        prop_assert!(k <= n / 2);
        if n >= 2 {
            prop_assert!(k >= 1);
        }
    }

    #[test]
    fn top_k_pairs_are_one_to_one(n in 2usize..14, c in 1usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let cls: Vec<Tensor> = (0..n).map(|_| Tensor::uniform(&[c], -1.0, 1.0, &mut rng)).collect();
        let refs: Vec<&Tensor> = cls.iter().collect();
        let g = n.div_ceil(2);
        let sim = cls_similarity(&refs[..g], &refs[g..]).unwrap();
        for i in 0..sim.gallery() {
            for j in 0..sim.probe() {
                prop_assert!(sim.get(i, j).abs() <= 1.0 + 1e-9);
            }
        }
        let k = n / 2;
        let pairs = select_pairs(&sim, k).unwrap();
        prop_assert_eq!(pairs.len(), k);
        let gs: HashSet<_> = pairs.iter().map(|p| p.gallery).collect();
        let ps: HashSet<_> = pairs.iter().map(|p| p.probe).collect();
        prop_assert_eq!(gs.len(), k);
        prop_assert_eq!(ps.len(), k);
        for w in pairs.windows(2) {
            prop_assert!(w[0].similarity >= w[1].similarity);
        }
    }

    #[test]
    fn fusion_conserves_members_and_count(n in 2usize..12, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let regions: Vec<Region> = (0..n).map(|i| region(2, 2, 3, 1 + i % 3, &mut rng)).collect();
        let k = n / 2;
        let (out, pairs) = fuse_topk(&regions, k, MergeWeighting::Members).unwrap();
        prop_assert_eq!(out.len(), n - k);
        prop_assert_eq!(pairs.len(), k);
        let before: usize = regions.iter().map(|r| r.members).sum();
        let after: usize = out.iter().map(|r| r.members).sum();
        prop_assert_eq!(before, after);
    }

    #[test]
    fn members_weighting_is_associative(seed in any::<u64>(), m in proptest::collection::vec(1usize..5, 3)) {
        let mut rng = Rng::new(seed);
        let rs: Vec<Region> = m.iter().map(|&k| region(2, 3, 2, k, &mut rng)).collect();
        // fuse r0 with r1, then the result with r2, with pairs forced by k = 1
        let (ab, _) = fuse_topk(&rs[..2], 1, MergeWeighting::Members).unwrap();
        let (abc, _) = fuse_topk(&[ab[0].clone(), rs[2].clone()], 1, MergeWeighting::Members).unwrap();
        let total = (m[0] + m[1] + m[2]) as f64;
        for i in 0..abc[0].grid.len() {
            let expect = rs.iter().zip(&m).map(|(r, &k)| k as f64 * r.grid.data()[i]).sum::<f64>() / total;
            prop_assert!((abc[0].grid.data()[i] - expect).abs() <= 1e-12);
        }
    }

    #[test]
    fn avg_expansion_is_a_convex_combination(
        gh in 1usize..4, gw in 1usize..4, vertical in any::<bool>(), zero_pad in any::<bool>(), seed in any::<u64>()
    ) {
        let axis = if vertical { Axis::Vertical } else { Axis::Horizontal };
        let pad = if zero_pad { PadMode::Zero } else { PadMode::Replicate };
        let mut rng = Rng::new(seed);
        let r = region(2 * gh, 2 * gw, 3, 1, &mut rng);
        let out = expand(&r, ExpansionSpec::new(axis, ExpandMode::Avg), pad).unwrap();
        let lo = r.grid.data().iter().cloned().fold(f64::INFINITY, f64::min).min(if zero_pad { 0.0 } else { f64::INFINITY });
        let hi = r.grid.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max).max(if zero_pad { 0.0 } else { f64::NEG_INFINITY });
        for &v in out.grid.data() {
            prop_assert!(v >= lo - 1e-12 && v <= hi + 1e-12);
        }
        let expect_dims = if vertical { (gh, 2 * gw) } else { (2 * gh, gw) };
        prop_assert_eq!(out.grid_dims(), expect_dims);
        prop_assert_eq!(&out.cls, &r.cls);

        // a constant grid stays constant under replicate padding
        if !zero_pad {
            let flat = Region { grid: Tensor::full(&[2 * gh, 2 * gw, 3], 0.7), ..r.clone() };
            let out = expand(&flat, ExpansionSpec::new(axis, ExpandMode::Avg), pad).unwrap();
            prop_assert!(out.grid.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
        }
    }

    #[test]
    fn cat_expansion_doubles_channels(gh in 1usize..4, gw in 1usize..4, vertical in any::<bool>(), seed in any::<u64>()) {
        let axis = if vertical { Axis::Vertical } else { Axis::Horizontal };
        let mut rng = Rng::new(seed);
        let r = region(2 * gh, 2 * gw, 3, 1, &mut rng);
        let out = expand(&r, ExpansionSpec::new(axis, ExpandMode::Cat), PadMode::Replicate).unwrap();
        prop_assert_eq!(out.grid.shape()[2], 6);
        prop_assert_eq!(out.cls.len(), 6);
        prop_assert_eq!(out.tokens() - 1, (r.tokens() - 1) / 2);
    }

    #[test]
    fn c_index_matches_pair_count(
        n in 2usize..50, seed in any::<u64>()
    ) {
        let mut rng = Rng::new(seed);
        let risks: Vec<f64> = (0..n).map(|_| (rng.below(8) as f64) / 4.0).collect();
        let times: Vec<f64> = (0..n).map(|_| 1.0 + rng.below(6) as f64).collect();
        let events: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.6)).collect();
        match brute_c_index(&risks, &times, &events) {
            Some(expect) => prop_assert_eq!(c_index(&risks, &times, &events).unwrap(), expect),
            None => prop_assert!(c_index(&risks, &times, &events).is_err()),
        }
    }

    #[test]
    fn c_index_ignores_monotone_transforms(n in 3usize..40, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let risks: Vec<f64> = (0..n).map(|_| rng.normal()).collect();
        let times: Vec<f64> = (0..n).map(|_| 1.0 + rng.below(5) as f64).collect();
        let mut events: Vec<bool> = (0..n).map(|_| rng.bernoulli(0.7)).collect();
        events[0] = true;
        let mut times = times;
        times[0] = 0.0;
        let warped: Vec<f64> = risks.iter().map(|r| 3.0 * r.exp() + 1.0).collect();
        prop_assert_eq!(c_index(&risks, &times, &events).unwrap(), c_index(&warped, &times, &events).unwrap());
    }

    #[test]
    fn macro_f1_ignores_sample_order(n in 1usize..40, classes in 2usize..5, seed in any::<u64>()) {
        let mut rng = Rng::new(seed);
        let preds: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let labels: Vec<usize> = (0..n).map(|_| rng.below(classes)).collect();
        let mut idx: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut idx);
        let p2: Vec<usize> = idx.iter().map(|&i| preds[i]).collect();
        let l2: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let a = macro_f1(&preds, &labels, classes).unwrap();
        let b = macro_f1(&p2, &l2, classes).unwrap();
        prop_assert!((a - b).abs() < 1e-15);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn km_without_censoring_is_empirical(times in proptest::collection::vec(1u32..10, 1..40)) {
        let t: Vec<f64> = times.iter().map(|&v| v as f64).collect();
        let events = vec![true; t.len()];
        let curve = km_curve(&t, &events).unwrap();
        for p in &curve {
            let beyond = t.iter().filter(|&&x| x > p.t).count();
            prop_assert_eq!(p.survival, beyond as f64 / t.len() as f64);
        }
    }

    #[test]
    fn event_likelihood_matches_survival_product(
        logits in proptest::collection::vec(-4.0f64..4.0, 1..8), pick in any::<proptest::sample::Index>()
    ) {
        let l = Tensor::vector(logits.clone());
        let t = 1 + pick.index(logits.len());
        let h = hazards(&l);
        let s = hazard_to_survival(&h).unwrap();
        let prev = if t == 1 { 1.0 } else { s.data()[t - 2] };
        let nll = survival_nll(&l, SurvivalRecord::new(t, false)).unwrap();
        prop_assert!(((-nll).exp() - prev * h.data()[t - 1]).abs() <= 1e-12);
        let cens = survival_nll(&l, SurvivalRecord::new(t, true)).unwrap();
        prop_assert!(((-cens).exp() - s.data()[t - 1]).abs() <= 1e-12);
        for w in s.data().windows(2) {
            prop_assert!(w[1] <= w[0]);
        }
    }

    #[test]
    fn folds_partition_the_samples(n in 1usize..60, k in 1usize..6, seed in any::<u64>()) {
        prop_assume!(k <= n);
        let labels: Vec<usize> = (0..n).map(|i| i % 3).collect();
        let folds = kfold(n, k, seed, Some(&labels)).unwrap();
        prop_assert_eq!(folds.len(), k);
        let mut all: Vec<usize> = folds.iter().flatten().cloned().collect();
        all.sort();
        prop_assert_eq!(all, (0..n).collect::<Vec<_>>());
        let sizes: Vec<usize> = folds.iter().map(Vec::len).collect();
        prop_assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
    }

    #[test]
    fn tensor_files_round_trip(shape in proptest::collection::vec(1usize..5, 0..4), seed in any::<u64>()) {
        let t = Tensor::uniform(&shape, -1e3, 1e3, &mut Rng::new(seed));
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t, DType::F64).unwrap();
        prop_assert_eq!(read_tensor(&mut buf.as_slice()).unwrap(), t);
    }
}

#[test]
fn bundled_configs_round_trip_through_text() {
    for name in ["pixelmamba-6m", "pixelmamba-21m", "tiny-8", "tiny-4"] {
        let cfg = NetworkConfig::bundled(name).unwrap();
        assert_eq!(NetworkConfig::parse(&cfg.to_text()).unwrap(), cfg);
    }
}
