//! Acceptance suite: one test per verification gate, each printing a
//! PASS line (run with `--nocapture` to see them).

mod common;

use std::time::Instant;
use tinydet_core::bbox::{BBox, IouVariant, iou, overlap_loss};
use tinydet_core::eval::{Detection, GroundTruth, NmsConfig, average_precision, map_eval, nms};
use tinydet_core::gradcheck::{
    DEFAULT_STEP, check_nwd_grads, check_overlap_grads, sal_nwd_grad_check,
};
use tinydet_core::msfd::{ConvSpec, DsConvParams, depthwise_separable, flop_count, flop_ratio};
use tinydet_core::prune::{
    DriftSpec, PruneSchedule, cosine_similarity_matrix, derive_mask, duplicated_pair_bank,
    random_bank, simulate_convergence, sparsity,
};
use tinydet_core::rng::seeded_rng;
use tinydet_core::salnwd::{SalNwdConfig, nwd, nwd_loss};
use tinydet_core::tensor::{FeatureMap, FilterBank};

use ndarray::Array4;
use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
    BBox::new(cx, cy, w, h).unwrap()
}

#[test]
fn gradients_match_central_differences() {
    let started = Instant::now();
    let mut worst: f64 = 0.0;
    for variant in IouVariant::ALL {
        let report = check_overlap_grads(variant, 500, 2024, DEFAULT_STEP);
        assert!(
            report.max_rel_err < 1e-4,
            "{variant:?} max relative error {}",
            report.max_rel_err
        );
        worst = worst.max(report.max_rel_err);
    }
    let report = check_nwd_grads(12.8, 500, 2025, DEFAULT_STEP);
    assert!(
        report.max_rel_err < 1e-4,
        "nwd max relative error {}",
        report.max_rel_err
    );
    worst = worst.max(report.max_rel_err);

    let report = sal_nwd_grad_check(&SalNwdConfig::default(), 500, 2026);
    assert!(
        report.max_rel_err < 1e-4,
        "batch max relative error {}",
        report.max_rel_err
    );
    worst = worst.max(report.max_rel_err);

    let elapsed = started.elapsed();
    assert!(
        elapsed.as_secs_f64() < 10.0,
        "gradient checks took {elapsed:?}"
    );
    println!(
        "PASS gradient agreement: IoU/GIoU/DIoU/CIoU, NWD and batched hybrid gradients all \
         within 1e-4 of central differences (500 instances each, worst {worst:.2e}, {elapsed:?})"
    );
}

#[test]
fn disjoint_pairs_flat_for_iou_but_not_nwd() {
    let mut rng = seeded_rng(31);
    for trial in 0..100 {
        // Disjoint by construction: right box starts past the left box's
        // far edge.
        let w1 = rng.random_range(0.02..0.15);
        let h1 = rng.random_range(0.02..0.15);
        let w2 = rng.random_range(0.02..0.15);
        let h2 = rng.random_range(0.02..0.15);
        let cx1 = rng.random_range(0.05..0.3);
        let gap = rng.random_range(0.02..0.2);
        let cx2 = cx1 + w1 / 2.0 + w2 / 2.0 + gap;
        let pred = bb(cx1, rng.random_range(0.2..0.8), w1, h1);
        let tgt = bb(cx2, rng.random_range(0.2..0.8), w2, h2);
        assert_eq!(iou(&pred, &tgt), 0.0, "trial {trial} not disjoint");

        let flat = overlap_loss(&pred, &tgt, IouVariant::Iou);
        assert_eq!(flat.value, 1.0);
        assert_eq!(flat.grad[0], 0.0);
        assert_eq!(flat.grad[1], 0.0);

        let smooth = nwd_loss(&pred, &tgt, 12.8);
        assert!(
            smooth.grad_norm() > 0.0,
            "trial {trial} nwd gradient vanished"
        );
    }
    println!(
        "PASS zero-gradient reproduction: 100 random disjoint pairs have exactly-zero plain-IoU \
         center gradients and nonzero NWD gradient norms"
    );
}

#[test]
fn nwd_scalar_values_match_independent_evaluation() {
    let a = bb(0.0, 0.0, 10.0, 10.0);
    let b = bb(3.0, 4.0, 10.0, 10.0);
    let direct = (-(3.0f64 * 3.0 + 4.0 * 4.0).sqrt() / 12.8).exp();
    assert!((nwd(&a, &b, 12.8) - direct).abs() < 1e-9);
    assert!((direct - 0.676_633_846_161_729).abs() < 1e-12);

    let c = bb(0.0, 0.0, 4.0, 4.0);
    let d = bb(0.0, 0.0, 8.0, 8.0);
    let direct = (-(2.0f64 * 2.0 + 2.0 * 2.0).sqrt() / 12.8).exp();
    assert!((nwd(&c, &d, 12.8) - direct).abs() < 1e-9);
    assert!((direct - 0.801_740_035_342_139_6).abs() < 1e-12);
    println!(
        "PASS NWD scalar cases: exp(-5/12.8) and exp(-sqrt(8)/12.8) reproduce the independent \
         evaluations to 1e-9"
    );
}

#[test]
fn theta_sensitivity_on_random_and_duplicated_banks() {
    // 64 filters over a 64-channel 3x3 layer (fan-in 576), 50 seeds.
    let sims: Vec<_> = (0..50)
        .map(|seed| cosine_similarity_matrix(&random_bank(64, 64, 3, 1000 + seed)))
        .collect();
    for theta in [0.20, 0.30, 0.85] {
        for (i, sim) in sims.iter().enumerate() {
            let s = sparsity(&derive_mask(sim, theta));
            assert_eq!(s, 0.0, "theta {theta}, seed {i}: sparsity {s}");
        }
    }
    let aggressive: Vec<f64> = sims
        .iter()
        .map(|s| sparsity(&derive_mask(s, 0.10)))
        .collect();
    let mean = aggressive.iter().sum::<f64>() / aggressive.len() as f64;
    assert!(
        (10.0..=35.0).contains(&mean),
        "theta 0.10 mean sparsity {mean}"
    );

    let duplicated = duplicated_pair_bank(64, 16, 3, 7);
    let s = sparsity(&derive_mask(&cosine_similarity_matrix(&duplicated), 0.85));
    assert_eq!(s, 50.0);
    println!(
        "PASS theta sensitivity: 0.00% sparsity at theta in {{0.20, 0.30, 0.85}} for 50/50 random \
         banks, mean {mean:.2}% at theta 0.10, exactly 50% on the duplicated-pair bank"
    );
}

#[test]
fn lazy_schedule_traces_and_recompute_counts() {
    let drift = DriftSpec::default();
    let seed = 99;
    let trace = |interval: u32| {
        simulate_convergence(
            &drift,
            PruneSchedule {
                interval,
                ..Default::default()
            },
            seed,
        )
        .unwrap()
    };
    let n1 = trace(1);
    let n5 = trace(5);
    let n10 = trace(10);

    assert_eq!(
        n10.at_epoch(15),
        0.0,
        "interval 10 must still be warm at epoch 15"
    );
    for epoch in 25..=drift.epochs {
        assert_eq!(n5.at_epoch(epoch), n10.at_epoch(epoch), "epoch {epoch}");
    }
    assert_eq!(n1.recompute_count(), 40);
    assert_eq!(n5.recompute_count(), 8);
    println!(
        "PASS lazy schedule: interval 10 sits at 0.00% at epoch 15 and matches interval 5 from \
         epoch 25 on; recompute counts over 50 epochs are 40 (N=1) vs 8 (N=5)"
    );
}

#[test]
fn separable_convolution_flops_and_equivalence() {
    let r64 = flop_ratio(64, 64, 3, 64, 64);
    let r128 = flop_ratio(128, 128, 3, 64, 64);
    assert!((r64 - 36864.0 / 4672.0).abs() < 1e-12);
    assert!((r128 - 147456.0 / 17536.0).abs() < 1e-12);
    // Exact counts behind the ratios.
    let std64 = ConvSpec::standard(64, 64, 3, 1, 1);
    let ds64 = ConvSpec::depthwise_separable(64, 64, 3, 1, 1);
    assert_eq!(flop_count(&std64, 8, 8), 9 * 64 * 64 * 64);
    assert_eq!(flop_count(&ds64, 8, 8), (9 * 64 + 64 * 64) * 64);

    let mut rng = seeded_rng(55);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let c_in = rng.random_range(2..6usize);
        let c_out = rng.random_range(2..8usize);
        let h = rng.random_range(4..9usize);
        let w = rng.random_range(4..9usize);
        let x = FeatureMap::new(Array4::from_shape_fn((1, c_in, h, w), |_| {
            rng.sample::<f64, _>(StandardNormal)
        }))
        .unwrap();
        let params = random_ds_params(c_in, c_out, &mut rng);
        let fused = depthwise_separable(&x, &params).unwrap();
        let reference = two_stage_reference(&x, &params);
        for (a, b) in fused.data().iter().zip(reference.data().iter()) {
            let diff = (a - b).abs();
            assert!(diff < 1e-5, "trial {trial}: {diff}");
            worst = worst.max(diff);
        }
    }
    println!(
        "PASS separable convolution: MAC ratios {r64:.2}x (C=64) and {r128:.2}x (C=128); fused \
         kernel matches the two-stage reference on 100 random tensors (worst {worst:.1e})"
    );
}

fn random_ds_params(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> DsConvParams {
    let dw = FilterBank::new(Array4::from_shape_fn((c_in, 1, 3, 3), |_| {
        rng.sample::<f64, _>(StandardNormal)
    }))
    .unwrap();
    let pw = FilterBank::new(Array4::from_shape_fn((c_out, c_in, 1, 1), |_| {
        rng.sample::<f64, _>(StandardNormal)
    }))
    .unwrap();
    DsConvParams {
        depthwise: dw,
        dw_bias: (0..c_in).map(|_| rng.sample(StandardNormal)).collect(),
        pointwise: pw,
        pw_bias: (0..c_out).map(|_| rng.sample(StandardNormal)).collect(),
        stride: 1,
        padding: 1,
    }
}

/// Reference route: per-channel spatial convolution, then a 1x1 mix.
fn two_stage_reference(x: &FeatureMap, p: &DsConvParams) -> FeatureMap {
    use tinydet_core::msfd::conv2d;
    let (n, c_in, h, w) = x.dim();
    let k = p.depthwise.kernel();
    let oh = (h + 2 * p.padding - k) / p.stride + 1;
    let ow = (w + 2 * p.padding - k) / p.stride + 1;
    let mut mid = Array4::zeros((n, c_in, oh, ow));
    for c in 0..c_in {
        let plane =
            FeatureMap::new(x.data().slice(ndarray::s![.., c..c + 1, .., ..]).to_owned()).unwrap();
        let kernel = FilterBank::new(
            p.depthwise
                .weights()
                .slice(ndarray::s![c..c + 1, .., .., ..])
                .to_owned(),
        )
        .unwrap();
        let spec = ConvSpec::standard(1, 1, k, p.stride, p.padding);
        let out = conv2d(&plane, &kernel, &[p.dw_bias[c]], &spec).unwrap();
        mid.slice_mut(ndarray::s![.., c..c + 1, .., ..])
            .assign(out.data());
    }
    let mid = FeatureMap::new(mid).unwrap();
    let spec = ConvSpec::standard(c_in, p.pointwise.c_out(), 1, 1, 0);
    conv2d(&mid, &p.pointwise, &p.pw_bias, &spec).unwrap()
}

#[test]
fn evaluator_matches_brute_force_oracle() {
    // Hand case: ranked TP, FP, TP over two ground truths.
    let g1 = GroundTruth::new("img", 0, bb(0.2, 0.2, 0.1, 0.1));
    let g2 = GroundTruth::new("img", 0, bb(0.8, 0.8, 0.1, 0.1));
    let hand = vec![
        Detection::new("img", 0, bb(0.2, 0.2, 0.1, 0.1), 0.9).unwrap(),
        Detection::new("img", 0, bb(0.5, 0.5, 0.1, 0.1), 0.8).unwrap(),
        Detection::new("img", 0, bb(0.8, 0.8, 0.1, 0.1), 0.7).unwrap(),
    ];
    let ap = average_precision(&hand, &[g1, g2], 0, 0.5);
    assert!((ap - 0.8333).abs() < 5e-5, "hand AP {ap}");

    let mut equal = 0usize;
    for seed in 0..200 {
        let (dets, gts) = micro_instance(seed);
        let expected = common::oracle_map50(&dets, &gts);
        let got = map_eval(&dets, &gts).unwrap().map50;
        assert_eq!(got, expected, "seed {seed}");
        equal += 1;
    }
    println!(
        "PASS evaluator oracle: hand-computed AP 0.8333 reproduced; map50 equals the naive \
         brute-force oracle exactly on {equal}/200 random micro-instances"
    );
}

/// Up to 10 boxes on a coarse grid, up to 3 classes, 1-2 images.
fn micro_instance(seed: u64) -> (Vec<Detection>, Vec<GroundTruth>) {
    let mut rng = seeded_rng(7000 + seed);
    let grid = |rng: &mut ChaCha8Rng, lo: u32, hi: u32| rng.random_range(lo..hi) as f64 / 32.0;
    let n_classes = rng.random_range(1..=3usize);
    let n_images = rng.random_range(1..=2usize);
    let n_gts = rng.random_range(1..=5usize);
    let n_dets = rng.random_range(0..=5usize);

    let mut gts = Vec::with_capacity(n_gts);
    for _ in 0..n_gts {
        let image = format!("img{}", rng.random_range(0..n_images));
        let class = rng.random_range(0..n_classes);
        let b = bb(
            grid(&mut rng, 6, 26),
            grid(&mut rng, 6, 26),
            grid(&mut rng, 1, 8),
            grid(&mut rng, 1, 8),
        );
        gts.push(GroundTruth::new(image, class, b));
    }
    let mut dets = Vec::with_capacity(n_dets);
    for _ in 0..n_dets {
        let score = rng.random_range(1..64u32) as f64 / 64.0;
        // Half the detections shadow a ground truth with a small grid
        // offset, the rest land anywhere.
        if rng.random_range(0.0..1.0) < 0.5 {
            let gt = &gts[rng.random_range(0..gts.len())];
            let dx = (rng.random_range(0..3u32) as f64 - 1.0) / 32.0;
            let dy = (rng.random_range(0..3u32) as f64 - 1.0) / 32.0;
            let b = bb(
                gt.bbox.cx() + dx,
                gt.bbox.cy() + dy,
                gt.bbox.w(),
                gt.bbox.h(),
            );
            let class = if rng.random_range(0.0..1.0) < 0.85 {
                gt.class_id
            } else {
                rng.random_range(0..n_classes)
            };
            dets.push(Detection::new(gt.image_id.clone(), class, b, score).unwrap());
        } else {
            let image = format!("img{}", rng.random_range(0..n_images));
            let class = rng.random_range(0..n_classes);
            let b = bb(
                grid(&mut rng, 6, 26),
                grid(&mut rng, 6, 26),
                grid(&mut rng, 1, 8),
                grid(&mut rng, 1, 8),
            );
            dets.push(Detection::new(image, class, b, score).unwrap());
        }
    }
    (dets, gts)
}

#[test]
fn nms_idempotence_and_conf_monotonicity() {
    let mut rng = seeded_rng(808);
    for trial in 0..1000 {
        let n = rng.random_range(1..=24usize);
        let dets: Vec<Detection> = (0..n)
            .map(|_| {
                let image = format!("img{}", rng.random_range(0..2u32));
                let class = rng.random_range(0..2usize);
                let b = bb(
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.2..0.8),
                    rng.random_range(0.02..0.3),
                    rng.random_range(0.02..0.3),
                );
                Detection::new(image, class, b, rng.random_range(0.0..1.0)).unwrap()
            })
            .collect();
        let iou_threshold = rng.random_range(0.2..0.8);
        let lo = NmsConfig {
            conf_threshold: rng.random_range(0.0..0.4),
            iou_threshold,
        };
        let hi = NmsConfig {
            conf_threshold: lo.conf_threshold + rng.random_range(0.0..0.5),
            iou_threshold,
        };

        let once = nms(&dets, &lo);
        let twice = nms(&once, &lo);
        assert_eq!(once, twice, "trial {trial}: idempotence");
        assert!(
            nms(&dets, &hi).len() <= once.len(),
            "trial {trial}: raising the cut must not add detections"
        );
    }
    println!(
        "PASS NMS behavior: idempotent and monotone in the confidence threshold on 1000 random \
         detection sets"
    );
}
