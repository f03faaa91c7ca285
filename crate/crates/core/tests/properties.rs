#[path = "support/oracles.rs"]
mod oracles;

use std::collections::BTreeSet;

use proptest::collection::vec;
use proptest::prelude::*;
use rand::Rng as _;

use oracles::*;
use ugf_core::bfe::{BranchTag, FeatureStack};
use ugf_core::fusion::{am_fuse, ugf_fuse, va_fuse, AmParams};
use ugf_core::geometry::{backproject, project_cloud, project_point, RadarPoint, SensorRig};
use ugf_core::mdn::{decode_boxes, mdn_forward, nms, AnchorSet, BBox, Detection, Mdn, HEAD_CHANNELS, STRIDES};
use ugf_core::metrics::{
    average_precision, evaluate, match_detections, max_f1, pr_curve, EvalConfig, Frame,
};
use ugf_core::synthdata::{assign_splits, generate_scene, SceneGenConfig, Split, SplitRatios};
use ugf_core::tensor::{ops, optim::sgd_step_with_lr, seeded_rng, NdArray, Real, SgdConfig, SgdState, Tensor};

fn bbox() -> impl Strategy<Value = BBox> {
    (0.0..100.0f64, 0.0..100.0f64, 0.5..40.0f64, 0.5..40.0f64).prop_map(|(x, y, w, h)| BBox::new(x, y, x + w, y + h))
}

fn detection() -> impl Strategy<Value = Detection> {
    (bbox(), 0.0..1.0f64).prop_map(|(b, c)| Detection::new(b, c))
}

fn map(c: usize, h: usize, w: usize, seed: u64, scale: f64) -> Tensor {
    let mut rng = seeded_rng(seed);
    Tensor::constant(NdArray::from_fn(vec![c, h, w], |_| (rng.gen_range(-1.0..1.0) * scale) as Real))
}

fn stack(n: usize, shape: (usize, usize, usize), seed: u64, branch: BranchTag) -> FeatureStack {
    FeatureStack {
        samples: (0..n).map(|i| map(shape.0, shape.1, shape.2, seed.wrapping_mul(31).wrapping_add(i as u64), 1.0)).collect(),
        branch,
    }
}

fn values(t: &Tensor) -> Vec<Real> {
    t.value().data().to_vec()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn iou_symmetric_bounded_and_reflexive(a in bbox(), b in bbox()) {
        let ab = a.iou(&b);
        prop_assert_eq!(ab, b.iou(&a));
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
        prop_assert!((ab - iou_ref(&a, &b)).abs() < 1e-12);
    }

    #[test]
    fn nms_output_is_ordered_separated_subset(dets in vec(detection(), 0..60), t in 0.05..0.95f64) {
        let kept = nms(&dets, t);
        prop_assert!(kept.windows(2).all(|w| w[0].confidence >= w[1].confidence));
        for (i, a) in kept.iter().enumerate() {
            prop_assert!(dets.contains(a));
            for b in &kept[i + 1..] {
                prop_assert!(a.bbox.iou(&b.bbox) <= t);
            }
        }
        prop_assert_eq!(kept, nms_ref(&dets, t));
    }

    #[test]
    fn pr_recall_monotone_and_accounts_for_every_truth(
        dets in vec(detection(), 0..30),
        gts in vec(bbox(), 0..10),
        t in 0.3..0.9f64,
    ) {
        let m = match_detections(&dets, &gts, t);
        let scored: Vec<(f64, bool)> = dets.iter().map(|d| d.confidence).zip(m.true_positive.iter().copied()).collect();
        let curve = pr_curve(&scored, gts.len());
        prop_assert!(curve.windows(2).all(|w| w[0].1 <= w[1].1));
        prop_assert_eq!(m.true_positives() + m.false_negatives, gts.len());
        if let (Some(last), false) = (curve.last(), gts.is_empty()) {
            prop_assert!((last.1 - m.true_positives() as f64 / gts.len() as f64).abs() < 1e-12);
        }
        for &(p, r) in &curve {
            prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
        }
    }

    #[test]
    fn ap_and_f1_depend_only_on_confidence_rank(
        dets in vec(detection(), 1..25),
        gts in vec(bbox(), 1..8),
    ) {
        let frames = |d: Vec<Detection>| -> Vec<Frame<Detection>> { vec![("f".to_string(), d)] };
        let truth: Vec<Frame<BBox>> = vec![("f".to_string(), gts)];
        let cfg = EvalConfig { nms_iou: 0.99, ..EvalConfig::default() };
        let base = evaluate(&frames(dets.clone()), &truth, &cfg).unwrap();
        // strictly increasing map of (0,1) onto itself
        let squashed: Vec<Detection> = dets
            .iter()
            .map(|d| Detection::new(d.bbox, d.confidence.powi(3) * 0.5 + 0.25))
            .collect();
        let other = evaluate(&frames(squashed), &truth, &cfg).unwrap();
        for (a, b) in base.ap.iter().zip(&other.ap) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in base.mf1.iter().zip(&other.mf1) {
            prop_assert!((a - b).abs() < 1e-12);
        }
        // stricter thresholds never score higher
        prop_assert!(base.ap.windows(2).all(|w| w[0] >= w[1] - 1e-12));
    }

    #[test]
    fn metric_functions_match_references(
        dets in vec(detection(), 0..10),
        gts in vec(bbox(), 0..6),
        t in 0.3..0.9f64,
    ) {
        let m = match_detections(&dets, &gts, t);
        let (tp, fn_) = match_ref(&dets, &gts, t);
        prop_assert_eq!(&m.true_positive, &tp);
        prop_assert_eq!(m.false_negatives, fn_);
        let scored: Vec<(f64, bool)> = dets.iter().map(|d| d.confidence).zip(tp).collect();
        let curve = pr_curve(&scored, gts.len());
        prop_assert_eq!(&curve, &pr_ref(&scored, gts.len()));
        prop_assert!((average_precision(&curve) - ap101_ref(&curve)).abs() < 1e-9);
        prop_assert!((max_f1(&curve) - mf1_ref(&curve)).abs() < 1e-9);
    }

    #[test]
    fn spatial_softmax_sums_to_one_at_any_magnitude(
        seed in any::<u64>(),
        c in 1usize..4, h in 1usize..7, w in 1usize..7,
        scale in prop_oneof![Just(1.0), Just(100.0), Just(1e4)],
    ) {
        let y = ops::spatial_softmax(&map(c, h, w, seed, scale)).unwrap();
        let v = y.value();
        for ch in 0..c {
            let s: f64 = v.channel(ch).iter().map(|&x| x as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-5, "channel sum {}", s);
            prop_assert!(v.channel(ch).iter().all(|x| x.is_finite() && *x >= 0.0));
        }
    }

    #[test]
    fn dropout_identity_when_off_or_zero_rate(seed in any::<u64>(), p in 0.0..0.9f64) {
        let x = map(2, 3, 4, seed, 5.0);
        let mut rng = seeded_rng(seed);
        let off = ops::dropout(&x, p as Real, false, &mut rng).unwrap();
        let zero = ops::dropout(&x, 0.0, true, &mut rng).unwrap();
        let bits = |t: &Tensor| values(t).iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        prop_assert_eq!(bits(&off), bits(&x));
        prop_assert_eq!(bits(&zero), bits(&x));
    }

    #[test]
    fn stack_variance_nonnegative_and_zero_for_copies(seed in any::<u64>(), n in 2usize..6) {
        let samples: Vec<Tensor> = (0..n).map(|i| map(3, 4, 4, seed ^ i as u64, 3.0)).collect();
        let (_, var) = ops::stack_mean_var(&samples).unwrap();
        prop_assert!(values(&var).iter().all(|&v| v >= 0.0));
        let copies = vec![samples[0].clone(); n];
        let (mean, var) = ops::stack_mean_var(&copies).unwrap();
        prop_assert!(values(&var).iter().all(|&v| v == 0.0));
        prop_assert_eq!(values(&mean), values(&samples[0]));
    }

    #[test]
    fn sgd_with_zero_rate_changes_nothing(seed in any::<u64>(), momentum in 0.0..0.99f64, wd in 0.0..0.1f64) {
        let p = Tensor::parameter(map(2, 2, 2, seed, 1.0).value().clone());
        let before = values(&p);
        ops::sum(&ops::square(&p)).backward().unwrap();
        let cfg = SgdConfig { momentum, weight_decay: wd, ..SgdConfig::default() };
        let mut state = SgdState::new(std::slice::from_ref(&p));
        sgd_step_with_lr(std::slice::from_ref(&p), &mut state, &cfg, 0.0).unwrap();
        prop_assert_eq!(values(&p), before);
    }

    #[test]
    fn ugf_weights_are_spatial_distributions(seed in any::<u64>(), n in 2usize..5, c in 1usize..4, h in 1usize..6, w in 1usize..6) {
        let fm = stack(n, (c, h, w), seed, BranchTag::Main);
        let fa = stack(n, (c, h, w), seed.wrapping_add(1), BranchTag::Auxiliary);
        let fused = ugf_fuse(&fm, &fa, true).unwrap();
        prop_assert_eq!(fused.map.shape(), vec![c, h, w]);
        let (wm, wa) = fused.weight_maps.unwrap();
        for weights in [wm, wa] {
            let v = weights.value();
            for ch in 0..c {
                prop_assert!(v.channel(ch).iter().all(|&x| x >= 0.0));
                let s: f64 = v.channel(ch).iter().map(|&x| x as f64).sum();
                prop_assert!((s - 1.0).abs() < 1e-5);
            }
        }
        // the formula is symmetric in its branches
        let swapped = ugf_fuse(&fa, &fm, false).unwrap();
        for (a, b) in values(&fused.map).iter().zip(values(&swapped.map)) {
            prop_assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0));
        }
    }

    #[test]
    fn ugf_constant_variance_gives_uniform_weights(
        seed in any::<u64>(), n in 2usize..5, h in 1usize..6, w in 1usize..6, offset in -3.0..3.0f64,
    ) {
        // samples differing by per-sample constants have spatially constant variance
        let base = map(2, h, w, seed, 1.0);
        let shifted = |k: usize| {
            let d = (offset * k as f64) as Real;
            Tensor::constant(base.value().map(|v| v + d))
        };
        let fm = FeatureStack { samples: (0..n).map(shifted).collect(), branch: BranchTag::Main };
        let fa = FeatureStack { samples: vec![base.clone(); n], branch: BranchTag::Auxiliary };
        let (wm, wa) = ugf_fuse(&fm, &fa, true).unwrap().weight_maps.unwrap();
        let uniform = 1.0 / (h * w) as f64;
        for v in values(&wm).into_iter().chain(values(&wa)) {
            prop_assert!((v as f64 - uniform).abs() <= 1e-6);
        }
    }

    #[test]
    fn va_and_am_degenerate_cases(seed in any::<u64>(), n in 1usize..4, h in 1usize..5, w in 1usize..5) {
        let f = stack(n, (3, h, w), seed, BranchTag::Main);
        let zeros = FeatureStack { samples: vec![Tensor::constant(NdArray::zeros(vec![3, h, w])); n], branch: BranchTag::Auxiliary };
        let mean = if n == 1 { values(&f.samples[0]) } else { values(&ops::stack_mean_var(&f.samples).unwrap().0) };
        prop_assert_eq!(values(&va_fuse(&f, &zeros).unwrap().map), mean);
        let zero_main = FeatureStack { samples: zeros.samples.clone(), branch: BranchTag::Main };
        let radar = stack(n, (3, h, w), seed ^ 7, BranchTag::Auxiliary);
        let am = am_fuse(&zero_main, &radar, &AmParams::identity(3)).unwrap();
        prop_assert!(values(&am.map).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn projection_round_trip(u in 0.0..159.0f64, v in 0.0..127.0f64, d in 0.3..9.5f64) {
        let rig = SensorRig::synthetic(160, 128);
        let p = backproject(u, v, d, &rig).unwrap();
        let q = project_point(&p, &rig).unwrap();
        prop_assert!((q.u - u).abs() < 1e-6 && (q.v - v).abs() < 1e-6 && (q.depth - d).abs() < 1e-6);
        let again = backproject(q.u, q.v, q.depth, &rig).unwrap();
        prop_assert!((again.x - p.x).abs() < 1e-6 && (again.y - p.y).abs() < 1e-6 && (again.z - p.z).abs() < 1e-6);
    }

    #[test]
    fn rasterization_is_order_free_and_matches_scan(seed in any::<u64>(), n in 0usize..200) {
        let rig = SensorRig::synthetic(40, 32);
        let mut rng = seeded_rng(seed);
        let mut pts: Vec<RadarPoint> = (0..n)
            .map(|_| RadarPoint::new(rng.gen_range(-3.0..3.0), rng.gen_range(-2.0..2.0), rng.gen_range(-1.0..12.0)))
            .collect();
        // force collisions
        if n > 1 {
            let p = pts[0];
            pts.push(RadarPoint::new(p.x * 1.5, p.y * 1.5, p.z * 1.5));
        }
        let img = project_cloud(&pts, &rig);
        prop_assert_eq!(img.pixels.shape(), &[1, 32, 40]);
        let expected = raster_ref(&pts, &rig);
        prop_assert_eq!(img.pixels.data(), expected.as_slice());
        pts.reverse();
        prop_assert_eq!(project_cloud(&pts, &rig), img);
    }

    #[test]
    fn raising_objectness_keeps_existing_detections(seed in any::<u64>(), bump in 0.0..5.0f64, conf in 0.2..0.8f64) {
        let mut rng = seeded_rng(seed);
        let (w, h) = (64, 32);
        let mut raw: Vec<NdArray> = STRIDES
            .iter()
            .map(|s| NdArray::from_fn(vec![HEAD_CHANNELS, h / s, w / s], |_| rng.gen_range(-3.0..3.0)))
            .collect();
        let anchors = AnchorSet::default();
        let before = decode_boxes(&raw, &anchors, conf, (w, h)).unwrap();
        let scale = rng.gen_range(0..3);
        let plane = raw[scale].shape()[1] * raw[scale].shape()[2];
        let idx = (rng.gen_range(0..3) * 5 + 4) * plane + rng.gen_range(0..plane);
        raw[scale].data_mut()[idx] += bump as Real;
        let after = decode_boxes(&raw, &anchors, conf, (w, h)).unwrap();
        for d in &before {
            prop_assert!(after.iter().any(|a| a.bbox == d.bbox && a.confidence >= d.confidence));
        }
    }

    #[test]
    fn split_assignment_partitions_frames(n in 0usize..300, seed in any::<u64>()) {
        let splits = assign_splits(n, SplitRatios::default(), seed).unwrap();
        prop_assert_eq!(splits.len(), n);
        let count = |s: Split| splits.iter().filter(|&&x| x == s).count();
        prop_assert_eq!(count(Split::Train) + count(Split::Val) + count(Split::Test), n);
        prop_assert_eq!(count(Split::Train), (n as f64 * 0.64).round() as usize);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn detection_net_shape_ignores_values(seed in any::<u64>(), h in 1usize..4, w in 1usize..4, scale in 0.0..10.0f64) {
        let mut rng = seeded_rng(seed);
        let net = Mdn::new(&mut rng);
        let (h, w) = (4 * h, 4 * w);
        let fused = ugf_core::fusion::FusedFeature { map: map(128, h, w, seed, scale), weight_maps: None };
        let shapes: Vec<Vec<usize>> = mdn_forward(&fused, &net).unwrap().iter().map(Tensor::shape).collect();
        prop_assert_eq!(shapes, vec![vec![15, h, w], vec![15, h / 2, w / 2], vec![15, h / 4, w / 4]]);
    }

    #[test]
    fn scene_generation_is_a_function_of_config_and_seed(seed in any::<u64>()) {
        let cfg = SceneGenConfig { width: 64, height: 32, seed, ..SceneGenConfig::default() };
        let rig = SensorRig::synthetic(64, 32);
        let a = generate_scene(&cfg, &rig, "x", &mut seeded_rng(seed)).unwrap();
        let b = generate_scene(&cfg, &rig, "x", &mut seeded_rng(seed)).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert!(a.thermal.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for g in &a.gt_boxes {
            prop_assert!(g.x_min >= 0.0 && g.y_min >= 0.0 && g.x_max <= 64.0 && g.y_max <= 32.0);
        }
    }
}

#[test]
fn ablation_layer_sets_all_build() {
    use ugf_core::bfe::{build_bfe, BfeConfig};
    for top in 1..=5 {
        let layers: BTreeSet<usize> = (top..=5).collect();
        let cfg = BfeConfig { dropout_layers: layers, ..BfeConfig::default() };
        build_bfe(&cfg, &mut seeded_rng(0)).unwrap();
    }
}
