//! Synthetic detection scenes.
//!
//! Desk-scale substitutes for real aerial imagery: a seeded box generator
//! whose default size mixture keeps ~68% of objects below 32x32 px, a
//! jittered pseudo-detector for exercising the evaluator, and a
//! constructed crowded-tiny-box scene with a known NMS optimum.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use tinydet_core::bbox::BBox;
use tinydet_core::eval::{Detection, GroundTruth};
use tinydet_core::rng::seeded_rng;

/// Parameters of the random scene generator.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SceneSpec {
    /// Canvas side in pixels.
    pub image_size: u32,
    pub n_objects: usize,
    /// Box side range in pixels; the minimum must be at least 2.
    pub size_range: (f64, f64),
    /// Probability that an object is placed next to an earlier one.
    pub overlap_level: f64,
    pub class_count: usize,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            image_size: 640,
            n_objects: 100,
            size_range: (4.0, 64.0),
            overlap_level: 0.2,
            class_count: 10,
            seed: 0,
        }
    }
}

/// Fraction of boxes drawn below 32px on both sides when the size range
/// spans the cutoff, mirroring the benchmark's tiny-object share.
const TINY_FRACTION: f64 = 0.68;
const TINY_CUTOFF: f64 = 32.0;

/// Deterministic random scene; boxes come out in normalized coordinates
/// under image id "scene".
pub fn gen_synthetic_scene(spec: &SceneSpec) -> Vec<GroundTruth> {
    assert!(spec.size_range.0 >= 2.0, "minimum box side is 2px");
    assert!(
        spec.size_range.1 >= spec.size_range.0,
        "size range is ordered"
    );
    assert!(spec.class_count >= 1, "at least one class");
    let mut rng = seeded_rng(spec.seed);
    let side = spec.image_size as f64;
    let (lo, hi) = spec.size_range;

    let sample_side = |rng: &mut ChaCha8Rng| -> (f64, f64) {
        if hi <= TINY_CUTOFF || lo >= TINY_CUTOFF {
            (rng.random_range(lo..hi), rng.random_range(lo..hi))
        } else if rng.random_range(0.0..1.0) < TINY_FRACTION {
            (
                rng.random_range(lo..TINY_CUTOFF),
                rng.random_range(lo..TINY_CUTOFF),
            )
        } else {
            (
                rng.random_range(TINY_CUTOFF..hi),
                rng.random_range(TINY_CUTOFF..hi),
            )
        }
    };

    let mut gts: Vec<GroundTruth> = Vec::with_capacity(spec.n_objects);
    for _ in 0..spec.n_objects {
        let (w, h) = sample_side(&mut rng);
        let anchored = !gts.is_empty() && rng.random_range(0.0..1.0) < spec.overlap_level;
        let (cx, cy) = if anchored {
            let prev = &gts[rng.random_range(0..gts.len())].bbox;
            let px = prev.cx() * side;
            let py = prev.cy() * side;
            let span = prev.w().max(prev.h()) * side;
            (
                (px + rng.random_range(-0.75..0.75) * span).clamp(w / 2.0, side - w / 2.0),
                (py + rng.random_range(-0.75..0.75) * span).clamp(h / 2.0, side - h / 2.0),
            )
        } else {
            (
                rng.random_range(w / 2.0..side - w / 2.0),
                rng.random_range(h / 2.0..side - h / 2.0),
            )
        };
        let class_id = rng.random_range(0..spec.class_count);
        let bbox = BBox::new(cx / side, cy / side, w / side, h / side)
            .expect("generated sizes are positive");
        gts.push(GroundTruth {
            image_id: "scene".to_string(),
            class_id,
            bbox,
            ignored: false,
        });
    }
    gts
}

/// Fraction of ground truths below the 32px cutoff on both sides.
pub fn tiny_fraction(gts: &[GroundTruth], image_size: u32) -> f64 {
    let side = image_size as f64;
    let tiny = gts
        .iter()
        .filter(|g| g.bbox.w() * side < TINY_CUTOFF && g.bbox.h() * side < TINY_CUTOFF)
        .count();
    tiny as f64 / gts.len() as f64
}

/// Pseudo-detector noise model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JitterSpec {
    /// Standard deviation of the center offset, in pixels.
    pub center_sigma_px: f64,
    /// Uniform score noise subtracted from the base score.
    pub score_noise: f64,
    /// Base score of an unperturbed detection.
    pub score_base: f64,
}

impl Default for JitterSpec {
    fn default() -> Self {
        JitterSpec {
            center_sigma_px: 1.0,
            score_noise: 0.3,
            score_base: 0.95,
        }
    }
}

/// One jittered detection per ground truth.
pub fn jittered_detections(
    gts: &[GroundTruth],
    jitter: &JitterSpec,
    image_size: u32,
    seed: u64,
) -> Vec<Detection> {
    let mut rng = seeded_rng(seed);
    let side = image_size as f64;
    gts.iter()
        .map(|gt| {
            let dx: f64 = rng.sample::<f64, _>(StandardNormal) * jitter.center_sigma_px / side;
            let dy: f64 = rng.sample::<f64, _>(StandardNormal) * jitter.center_sigma_px / side;
            let score =
                (jitter.score_base - rng.random_range(0.0..jitter.score_noise)).clamp(0.01, 1.0);
            let bbox = BBox::new(
                gt.bbox.cx() + dx,
                gt.bbox.cy() + dy,
                gt.bbox.w(),
                gt.bbox.h(),
            )
            .expect("jitter keeps sizes positive");
            Detection {
                image_id: gt.image_id.clone(),
                class_id: gt.class_id,
                bbox,
                score,
            }
        })
        .collect()
}

/// Crowded scene with a known NMS-tuning optimum.
///
/// Objects come in close pairs: two 10px ground-truth boxes whose centers
/// sit 3px apart (mutual IoU ≈ 0.54). Each ground truth produces one
/// accurate detection and one displaced duplicate whose IoU with the
/// accurate one lands in (0.5, 0.6) while staying below 0.5 against every
/// ground truth. Consequences on the standard threshold grid:
///
/// - iou 0.4 suppresses one accurate detection per pair (their mutual
///   IoU ≈ 0.43 exceeds it), losing recall;
/// - iou 0.5 keeps both accurate detections and removes both duplicates,
///   so the evaluation is perfect;
/// - iou 0.6 and up let the duplicates through as interleaved false
///   positives, losing precision.
pub fn crowded_tiny_scene(
    n_pairs: usize,
    image_size: u32,
    seed: u64,
) -> (Vec<GroundTruth>, Vec<Detection>) {
    let mut rng = seeded_rng(seed);
    let side = image_size as f64;
    let cols = ((side - 80.0) / 40.0) as usize;
    assert!(n_pairs <= cols * cols, "scene grid overflows the canvas");

    let size = 10.0;
    let mut gts = Vec::with_capacity(2 * n_pairs);
    let mut dets = Vec::with_capacity(4 * n_pairs);
    let norm_box = |cx: f64, cy: f64| {
        BBox::new(cx / side, cy / side, size / side, size / side).expect("fixed positive size")
    };
    for pair in 0..n_pairs {
        let x0 = 40.0 + 40.0 * (pair % cols) as f64;
        let y0 = 40.0 + 40.0 * (pair / cols) as f64;

        // Ground truths 3px apart.
        gts.push(GroundTruth {
            image_id: "crowd".to_string(),
            class_id: 0,
            bbox: norm_box(x0, y0),
            ignored: false,
        });
        gts.push(GroundTruth {
            image_id: "crowd".to_string(),
            class_id: 0,
            bbox: norm_box(x0 + 3.0, y0),
            ignored: false,
        });

        // Accurate detections offset 0.5px outward; duplicates a further
        // 3px outward. Scores keep each duplicate below its own accurate
        // detection while letting the two ranges interleave globally.
        let score_a = rng.random_range(0.70..0.95);
        let score_b = rng.random_range(0.70..0.95);
        let mut push_det = |cx: f64, score: f64| {
            dets.push(Detection {
                image_id: "crowd".to_string(),
                class_id: 0,
                bbox: norm_box(cx, y0),
                score,
            })
        };
        push_det(x0 - 0.5, score_a);
        push_det(x0 + 3.5, score_b);
        push_det(x0 - 3.5, score_a - rng.random_range(0.15..0.25));
        push_det(x0 + 6.5, score_b - rng.random_range(0.15..0.25));
    }
    (gts, dets)
}
