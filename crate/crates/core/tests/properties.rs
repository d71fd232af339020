use proptest::prelude::*;

use siamtpn_core::bbox::{giou, iou, BBox};
use siamtpn_core::eval::{
    auc, one_pass_eval, percentile, success_curve, success_thresholds, StaticTracker,
};
use siamtpn_core::head::{argmax2d, hanning, scale_penalty, ScoreGeometry};
use siamtpn_core::model::{Model, ModelConfig};
use siamtpn_core::ops::{layer_norm, softmax};
use siamtpn_core::serialize::{encode_weights, WeightsFile};
use siamtpn_core::synth::{
    distractor_box, synth_sequence, SequenceSpec, Trajectory, MAX_DISTRACTOR_IOU,
};
use siamtpn_core::tpn::NeckKind;
use siamtpn_core::Tensor;

fn bbox() -> impl Strategy<Value = BBox> {
    (-50.0..150.0f64, -50.0..150.0f64, 0.5..80.0f64, 0.5..80.0f64)
        .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h))
}

fn unit_values(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(0.0..=1.0f64, n)
}

proptest! {
    #[test]
    fn iou_is_symmetric_and_bounded(a in bbox(), b in bbox()) {
        let v = iou(&a, &b);
        prop_assert!((0.0..=1.0).contains(&v));
        prop_assert_eq!(v, iou(&b, &a));
        prop_assert_eq!(iou(&a, &a), 1.0);
    }

    #[test]
    fn giou_is_symmetric_bounded_and_below_iou(a in bbox(), b in bbox()) {
        let g = giou(&a, &b).unwrap();
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&g));
        prop_assert!((g - giou(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(g <= iou(&a, &b) + 1e-12);
        prop_assert!((giou(&a, &a).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn iou_is_translation_invariant(a in bbox(), b in bbox(), dx in -40.0..40.0f64, dy in -40.0..40.0f64) {
        let moved = iou(&a.translated(dx, dy), &b.translated(dx, dy));
        prop_assert!((moved - iou(&a, &b)).abs() < 1e-9);
    }

    #[test]
    fn argmax_survives_monotone_maps(v in prop::collection::vec(-5.0..5.0f64, 30), shift in -3.0..3.0f64, k in 0.1..4.0f64) {
        let t = Tensor::new([5, 6], v).unwrap();
        let want = argmax2d(&t);
        prop_assert_eq!(argmax2d(&t.map(|x| k * x + shift)), want);
        prop_assert_eq!(argmax2d(&t.map(|x| 1.0 / (1.0 + (-x).exp()))), want);
        let (i, j) = want;
        let best = t.get(&[i, j]);
        prop_assert!(t.data().iter().all(|&x| x <= best));
    }

    #[test]
    fn decoded_boxes_stay_in_the_crop(
        i in 0usize..17, j in 0usize..17,
        d in prop::array::uniform4(-50.0..400.0f64),
    ) {
        let g = ScoreGeometry::new(256, 32, 16).unwrap();
        prop_assume!(i < g.rows && j < g.cols);
        let b = g.decode(i, j, d);
        let [x0, y0, x1, y1] = b.corners();
        let s = g.search_res as f64 + 1e-9;
        prop_assert!(x0 >= -1e-9 && y0 >= -1e-9 && x1 <= s && y1 <= s);
        prop_assert!(b.w >= 1.0 - 1e-9 && b.h >= 1.0 - 1e-9);
    }

    #[test]
    fn success_curve_is_monotone_and_auc_is_its_trapezoid(ious in unit_values(40)) {
        let curve = success_curve(&ious);
        let t = success_thresholds();
        prop_assert_eq!(curve.len(), 21);
        prop_assert!(curve.windows(2).all(|w| w[1] <= w[0]));
        prop_assert_eq!(curve[0], 1.0);
        let trapezoid: f64 = t.windows(2).zip(curve.windows(2)).map(|(x, y)| (x[1] - x[0]) * (y[0] + y[1]) / 2.0).sum();
        let a = auc(&curve);
        prop_assert!((a - trapezoid).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&a));
    }

    #[test]
    fn percentile_is_a_sample_within_range(v in prop::collection::vec(-10.0..10.0f64, 1..30), p in 0.0..=100.0f64) {
        let q = percentile(&v, p);
        prop_assert!(v.contains(&q));
        prop_assert!(percentile(&v, 100.0) >= q);
    }

    #[test]
    fn softmax_rows_are_distributions(v in prop::collection::vec(-30.0..30.0f64, 12)) {
        let s = softmax(&Tensor::new([3, 4], v).unwrap(), 1).unwrap();
        for row in s.data().chunks(4) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn layer_norm_centres_and_scales(v in prop::collection::vec(-5.0..5.0f64, 16)) {
        prop_assume!(v.chunks(8).all(|r| r.iter().any(|&x| (x - r[0]).abs() > 1e-3)));
        let x = Tensor::new([2, 8], v).unwrap();
        let y = layer_norm(&x, &Tensor::ones([8]), &Tensor::zeros([8]), 1e-12).unwrap();
        for row in y.data().chunks(8) {
            let mean = row.iter().sum::<f64>() / 8.0;
            let var = row.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / 8.0;
            prop_assert!(mean.abs() < 1e-9);
            prop_assert!((var - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn scale_penalty_peaks_at_no_change(w in 2.0..100.0f64, h in 2.0..100.0f64, f in 0.5..2.0f64, k in 0.0..0.5f64) {
        prop_assert!((scale_penalty(k, (w, h), w, h) - 1.0).abs() < 1e-12);
        let p = scale_penalty(k, (w, h), w * f, h);
        prop_assert!(p > 0.0 && p <= 1.0 + 1e-12);
    }

    #[test]
    fn hanning_is_symmetric(n in 2usize..40) {
        let v = hanning(n);
        for i in 0..n {
            prop_assert!((v[i] - v[n - 1 - i]).abs() < 1e-12);
            prop_assert!((0.0..=1.0).contains(&v[i]));
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn pyramid_strides_follow_input_size(k in 2usize..12) {
        let cfg = ModelConfig {
            search_res: 32 * k,
            ..ModelConfig::toy(16, 2, 1)
        };
        let [p3, p4, p5] = cfg.search_shapes();
        prop_assert_eq!(p3, (4 * k, 4 * k));
        prop_assert_eq!(p4, (2 * k, 2 * k));
        prop_assert_eq!(p5, (k, k));
    }

    #[test]
    fn settings_round_trip(
        heads in 1usize..4, per_head in 1usize..5, blocks in 1usize..3,
        r in prop::array::uniform3(1usize..5), r_self in 1usize..4,
        window in 0.0..1.0f64, seed in any::<u64>(),
        kind in prop::sample::select(NeckKind::ALL.to_vec()),
    ) {
        let mut cfg = ModelConfig::toy(heads * per_head * 2, heads, blocks);
        cfg.neck.r_cross = r;
        cfg.neck.r_self = r_self;
        cfg.neck.kind = kind;
        cfg.post.window_influence = window;
        cfg.seed = seed;
        let text = cfg.to_settings().to_text();
        let back = siamtpn_core::config::Settings::parse(&text).unwrap().model_config(&ModelConfig::default()).unwrap();
        prop_assert_eq!(back, cfg);
    }

    #[test]
    fn synthetic_sequences_are_deterministic_and_in_frame(
        frames in 2usize..12, texture in any::<u64>(), seed in any::<u64>(),
        sinus in any::<bool>(), distractor in any::<bool>(), size_rate in -0.02..0.02f64,
    ) {
        let mut spec = SequenceSpec::easy(frames, texture, seed);
        spec.width = 96;
        spec.height = 80;
        spec.start = BBox::new(48.0, 40.0, 20.0, 16.0);
        spec.size_rate = size_rate;
        spec.distractor = distractor;
        if sinus {
            spec.trajectory = Trajectory::Sinusoidal { ax: 10.0, ay: 6.0, period: 9.0 };
        }
        let a = synth_sequence(&spec).unwrap();
        let b = synth_sequence(&spec).unwrap();
        prop_assert_eq!(&a.frames, &b.frames);
        prop_assert_eq!(&a.gt, &b.gt);
        for g in &a.gt {
            let [x0, y0, x1, y1] = g.corners();
            prop_assert!(x0 >= 0.0 && y0 >= 0.0 && x1 <= 96.0 && y1 <= 80.0, "{:?}", g);
            prop_assert!(g.w >= 8.0 && g.h >= 8.0);
        }
        if distractor {
            for g in &a.gt {
                prop_assert!(iou(&distractor_box(&spec, g).unwrap(), g) <= MAX_DISTRACTOR_IOU);
            }
        }
        for f in &a.frames {
            prop_assert!(f.data().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn static_tracker_auc_matches_recomputation(frames in 3usize..15, seed in any::<u64>()) {
        let seq = synth_sequence(&SequenceSpec::easy(frames, 1, seed)).unwrap();
        let r = one_pass_eval(&mut StaticTracker::default(), &seq).unwrap();
        let ious: Vec<f64> = seq.gt[1..].iter().map(|g| iou(&seq.gt[0], g)).collect();
        prop_assert_eq!(&r.ious, &ious);
        prop_assert!((r.auc - auc(&success_curve(&ious))).abs() < 1e-12);
        let again = one_pass_eval(&mut StaticTracker::default(), &seq).unwrap();
        prop_assert_eq!(r.ious, again.ious);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    #[test]
    fn weights_round_trip_is_byte_stable(heads in 1usize..3, blocks in 1usize..3, seed in any::<u64>()) {
        let mut cfg = ModelConfig::toy(8 * heads, heads, blocks);
        cfg.seed = seed;
        let model = Model::new(cfg).unwrap();
        let bytes = encode_weights(&model);
        let file = WeightsFile::parse(&bytes).unwrap();
        let mut loaded = Model::new(file.model_config().unwrap()).unwrap();
        file.apply(&mut loaded).unwrap();
        prop_assert_eq!(&loaded.cfg, &model.cfg);
        prop_assert_eq!(encode_weights(&loaded), bytes);
    }
}

#[test]
fn corner_format_example() {
    let a = BBox::from_xywh(0.0, 0.0, 2.0, 2.0);
    let b = BBox::from_xywh(1.0, 1.0, 2.0, 2.0);
    assert!((iou(&a, &b) - 1.0 / 7.0).abs() < 1e-15);
    let far = BBox::from_xywh(10.0, 10.0, 2.0, 2.0);
    assert_eq!(iou(&a, &far), 0.0);
}
