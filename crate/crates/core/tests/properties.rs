use amam_core::eval::{average_precision, coco_thresholds, iou, match_greedy, precision_recall};
use amam_core::ops::{self, conv_output_dim};
use amam_core::schedule::LrSchedule;
use amam_core::{
    math, AaBlock, AaConfig, Amam, AmamConfig, BBox, Detection, FeaturePyramid, FusionMode,
    ImageRecord, MeBlock, MeConfig, ParamStore, Shape, Tensor,
};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn tensor(shape: Shape, seed: u64) -> Tensor {
    Tensor::uniform(shape, -1.0, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_shape_is_a_function_of_input_shapes(
        n in 1usize..3, c in 1usize..4, h in 1usize..9, w in 1usize..9,
        co in 1usize..4, k in 1usize..4, stride in 1usize..3, pad in 0usize..2, seed: u64,
    ) {
        let x = tensor(Shape::new(n, c, h, w), seed);
        let kernel = tensor(Shape::new(co, c, k, k), seed ^ 1);
        let (oh, ow) = (conv_output_dim(h, k, stride, pad), conv_output_dim(w, k, stride, pad));
        if h + 2 * pad >= k && w + 2 * pad >= k {
            let y = ops::conv2d(&x, &kernel, None, stride, pad).unwrap();
            prop_assert_eq!(y.shape(), Shape::new(n, co, oh as usize, ow as usize));
            prop_assert_eq!(oh as usize, (h + 2 * pad - k) / stride + 1);
        } else {
            prop_assert!(ops::conv2d(&x, &kernel, None, stride, pad).is_err());
        }
    }

    #[test]
    fn split_concat_round_trip(n in 1usize..3, parts in 1usize..5, d in 1usize..4, h in 1usize..4, seed: u64) {
        let x = tensor(Shape::new(n, parts * d, h, h + 1), seed);
        let split = ops::split_channels(&x, parts).unwrap();
        prop_assert_eq!(split.len(), parts);
        let refs: Vec<&Tensor> = split.iter().collect();
        prop_assert_eq!(ops::concat_channels(&refs).unwrap(), x);
    }

    #[test]
    fn downsample_inverts_upsample(n in 1usize..3, c in 1usize..4, h in 1usize..6, w in 1usize..6, seed: u64) {
        let x = tensor(Shape::new(n, c, h, w), seed);
        let up = ops::upsample_nearest2x(&x);
        prop_assert_eq!(up.shape(), Shape::new(n, c, 2 * h, 2 * w));
        prop_assert_eq!(ops::downsample_avg2x(&up).unwrap(), x);
    }

    #[test]
    fn softmax_rows_normalized_and_shift_invariant(rows in 1usize..5, cols in 1usize..8, shift in -50.0f64..50.0, seed: u64) {
        let x = Tensor::uniform(Shape::matrix(rows, cols), -20.0, 20.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let s = ops::softmax_lastdim(&x).unwrap();
        for row in s.data().chunks(cols) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
        let shifted = ops::softmax_lastdim(&x.map(|v| v + shift)).unwrap();
        prop_assert!(s.max_abs_diff(&shifted) < 1e-9);
    }

    #[test]
    fn convex_pair_is_exact(logit in -40.0f64..40.0) {
        let (a, b) = math::convex_pair(logit);
        prop_assert_eq!(a + b, 1.0);
        prop_assert!((0.0..=1.0).contains(&a));
        if logit.abs() < 30.0 {
            prop_assert!(a > 0.0 && a < 1.0);
        }
        prop_assert!((a - 1.0 / (1.0 + (-logit).exp())).abs() < 1e-15);
    }

    #[test]
    fn me_preserves_current_shape(
        c_half in 1usize..4, h in 1usize..4, w in 1usize..4, shallow: bool, deep: bool, n in 1usize..3, seed: u64,
    ) {
        prop_assume!(shallow || deep);
        let c = 2 * c_half;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let me = MeBlock::new(&mut store, "me", MeConfig::new(c, shallow, deep), &mut rng).unwrap();
        let s = shallow.then(|| tensor(Shape::new(n, c / 2, 2 * h, 2 * w), seed ^ 1));
        let cur = tensor(Shape::new(n, c, h, w), seed ^ 2);
        let d = deep.then(|| tensor(Shape::new(n, 2 * c, (h / 2).max(1), (w / 2).max(1)), seed ^ 3));
        let deep_ok = h % 2 == 0 && w % 2 == 0;
        let out = me.apply(&store, s.as_ref(), &cur, d.as_ref());
        if deep && !deep_ok {
            // nearest 2x upsampling cannot reach an odd size
            prop_assert!(out.is_err());
        } else {
            prop_assert_eq!(out.unwrap().shape(), cur.shape());
        }
    }

    #[test]
    fn aa_preserves_shape(heads_pow in 0u32..4, mult in 1usize..3, h in 1usize..4, w in 1usize..4, mode in 0usize..4, seed: u64) {
        let heads = 1usize << heads_pow;
        let c = heads * mult;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let cfg = AaConfig::new(c, heads, FusionMode::ALL[mode]);
        let aa = AaBlock::new(&mut store, "aa", cfg, &mut rng).unwrap();
        let x = tensor(Shape::new(2, c, h, w), seed ^ 5);
        prop_assert_eq!(aa.apply(&store, &x).unwrap().shape(), x.shape());
    }

    #[test]
    fn amam_preserves_pyramid(
        heads_pow in 0u32..3, mult in 1usize..3, levels in 1usize..4, h0 in 1usize..3, w0 in 1usize..3,
        me: bool, aa: bool, mode in 0usize..4, seed: u64,
    ) {
        let heads = 1usize << heads_pow;
        let base = heads * mult;
        let cfg = AmamConfig {
            levels: (0..levels).map(|i| base << i).collect(),
            heads,
            fusion_mode: FusionMode::ALL[mode],
            enabled_me: me,
            enabled_aa: aa,
            seed,
            qk_dim: None,
        };
        let mut store = ParamStore::new();
        let amam = Amam::new(&mut store, "amam", &cfg).unwrap();
        let scale = 1 << (levels - 1);
        let maps = cfg.levels.iter().enumerate()
            .map(|(i, &c)| tensor(Shape::new(1, c, (h0 * scale) >> i, (w0 * scale) >> i), seed ^ i as u64))
            .collect();
        let pyr = FeaturePyramid::new(maps).unwrap();
        let out = amam.apply(&store, &pyr).unwrap();
        prop_assert_eq!(out.shapes(), pyr.shapes());
        if !me && !aa {
            prop_assert_eq!(out, pyr);
        }
    }

    #[test]
    fn iou_symmetric_and_bounded(a in box_strategy(), b in box_strategy()) {
        let ab = iou(&a, &b).unwrap();
        prop_assert_eq!(ab, iou(&b, &a).unwrap());
        prop_assert!((0.0..=1.0).contains(&ab));
        prop_assert_eq!(iou(&a, &a).unwrap(), 1.0);
    }

    #[test]
    fn precision_recall_match_counts(images in images_strategy(), thr_idx in 0usize..10) {
        let thr = coco_thresholds()[thr_idx];
        let m = match_greedy(&images, thr).unwrap();
        let dets: usize = images.iter().map(|im| im.dets.len()).sum();
        let gts: usize = images.iter().map(|im| im.gts.len()).sum();
        prop_assert_eq!(m.tp + m.fp, dets);
        prop_assert_eq!(m.tp + m.fn_, gts);
        let pr = precision_recall(m.counts());
        if dets > 0 {
            prop_assert_eq!(pr.precision, m.tp as f64 / dets as f64);
        } else {
            prop_assert!(pr.precision_degenerate && pr.precision == 0.0);
        }
        if gts > 0 {
            prop_assert_eq!(pr.recall, m.tp as f64 / gts as f64);
        }
    }

    #[test]
    fn ap_bounded_and_monotone_in_threshold(images in images_strategy()) {
        prop_assume!(images.iter().any(|im| !im.gts.is_empty()));
        let mut prev = f64::INFINITY;
        for thr in coco_thresholds() {
            let ap = average_precision(&images, thr).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            prop_assert!(ap <= prev + 1e-12, "AP rose from {} to {} at {}", prev, ap, thr);
            prev = ap;
        }
    }

    #[test]
    fn schedule_bounded_and_decaying(total in 2usize..400, warm_frac in 0.0f64..0.5) {
        let warmup = ((total as f64 * warm_frac) as usize).min(total - 1);
        let s = LrSchedule::new(total, warmup).unwrap();
        let mut prev = f64::INFINITY;
        for i in 0..=total {
            let lr = s.lr_at(i).unwrap();
            prop_assert!(lr > 0.0 && lr <= s.lr_init + 1e-15);
            if i >= warmup {
                prop_assert!(lr <= prev);
                prop_assert!(lr >= s.lr_final - 1e-15);
                prev = lr;
            }
        }
        prop_assert!((s.lr_at(warmup).unwrap() - 0.01).abs() < 1e-12);
        prop_assert!((s.lr_at(total).unwrap() - 0.002).abs() < 1e-12);
    }
}

fn box_strategy() -> impl Strategy<Value = BBox> {
    (0i32..20, 0i32..20, 1i32..10, 1i32..10).prop_map(|(x, y, w, h)| {
        BBox::new(x as f64, y as f64, (x + w) as f64, (y + h) as f64).unwrap()
    })
}

fn images_strategy() -> impl Strategy<Value = Vec<ImageRecord>> {
    let image = (
        prop::collection::vec(box_strategy(), 0..4),
        prop::collection::vec((box_strategy(), 0u32..5), 0..6),
    )
        .prop_map(|(gts, dets)| ImageRecord {
            id: String::new(),
            gts,
            dets: dets
                .into_iter()
                .map(|(bbox, s)| Detection {
                    bbox,
                    score: f64::from(s) / 4.0,
                })
                .collect(),
        });
    prop::collection::vec(image, 1..4)
}

#[test]
fn repeated_forward_is_bit_identical() {
    let cfg = AmamConfig {
        levels: vec![4, 8, 16],
        heads: 2,
        ..AmamConfig::default()
    };
    let mut store = ParamStore::new();
    let amam = Amam::new(&mut store, "amam", &cfg).unwrap();
    let maps = (0..3)
        .map(|i| tensor(Shape::new(2, 4 << i, 8 >> i, 8 >> i), i as u64))
        .collect();
    let pyr = FeaturePyramid::new(maps).unwrap();
    let a = amam.apply(&store, &pyr).unwrap();
    let b = amam.apply(&store, &pyr).unwrap();
    for (x, y) in a.maps.iter().zip(&b.maps) {
        assert!(x
            .data()
            .iter()
            .zip(y.data())
            .all(|(p, q)| p.to_bits() == q.to_bits()));
    }
    let mut store2 = ParamStore::new();
    let again = Amam::new(&mut store2, "amam", &cfg).unwrap();
    assert_eq!(again.apply(&store2, &pyr).unwrap(), a);
}
