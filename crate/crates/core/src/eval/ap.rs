//! Average precision, mAP, recall, PR curves and F1 sweeps.
//!
//! Matching is greedy in score order: each detection takes the
//! highest-IoU unmatched ground truth of its class in the same image,
//! provided the IoU reaches the threshold; ties go to the earlier ground
//! truth. Detections whose only qualifying match is an ignored ground
//! truth are discarded rather than counted as false positives.
//!
//! AP integrates the interpolated precision envelope. The default is the
//! exact area under the envelope (all-point interpolation); a fixed-grid
//! variant is available for protocol comparisons.

use super::{Detection, EvalError, GroundTruth};
use crate::bbox::iou;
use serde::Serialize;
use std::collections::{BTreeMap, BTreeSet};

/// How the precision envelope is integrated into AP.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ApInterpolation {
    /// Exact area under the interpolated envelope.
    #[default]
    AllPoint,
    /// Mean of the envelope sampled at `n` evenly spaced recall
    /// thresholds from 0 to 1.
    Points(usize),
}

/// One cumulative precision/recall point of a class's ranked detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct PrPoint {
    pub recall: f64,
    pub precision: f64,
    pub score: f64,
}

/// Operating point and optional extras for [`map_eval_with`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    /// Score cut used for recall, the confusion matrix and F1-style
    /// counting. AP itself is threshold-free.
    pub conf_threshold: f64,
    /// IoU required for a match at the operating point.
    pub iou_threshold: f64,
    /// Image side length in pixels; enables the small/medium/large AP
    /// breakdown for normalized boxes.
    pub image_size: Option<f64>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            conf_threshold: 0.0,
            iou_threshold: 0.5,
            image_size: None,
        }
    }
}

/// AP@50 restricted to COCO size buckets (areas below 32², below 96², and
/// the rest, in pixels). `None` when the bucket holds no ground truth.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SizeBreakdown {
    pub ap50_small: Option<f64>,
    pub ap50_medium: Option<f64>,
    pub ap50_large: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalResult {
    /// Macro AP at IoU 0.5 over classes present in the ground truth.
    pub map50: f64,
    /// Macro AP averaged over IoU thresholds 0.50, 0.55, …, 0.95.
    pub map5095: f64,
    /// Matched fraction of ground truths at the operating point.
    pub recall: f64,
    pub per_class_ap50: BTreeMap<usize, f64>,
    pub pr_curves: BTreeMap<usize, Vec<PrPoint>>,
    /// Row-normalized (K+1)×(K+1) matrix; the last row/column is the
    /// background (missed objects / spurious detections).
    pub confusion: Vec<Vec<f64>>,
    pub size_breakdown: Option<SizeBreakdown>,
}

/// Ranked match outcomes of one class.
struct RankedMatches {
    /// true = matched a ground truth, sorted by descending score.
    outcomes: Vec<(f64, bool)>,
    npos: usize,
}

fn rank_and_match(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: usize,
    iou_thr: f64,
) -> RankedMatches {
    // Ground truths of the class, grouped by image, in input order.
    let mut live: BTreeMap<&str, Vec<(&GroundTruth, bool)>> = BTreeMap::new();
    let mut npos = 0;
    for gt in gts.iter().filter(|g| g.class_id == class_id) {
        live.entry(gt.image_id.as_str())
            .or_default()
            .push((gt, false));
        if !gt.ignored {
            npos += 1;
        }
    }

    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut outcomes = Vec::with_capacity(ranked.len());
    for det in ranked {
        let Some(candidates) = live.get_mut(det.image_id.as_str()) else {
            outcomes.push((det.score, false));
            continue;
        };
        // Real ground truths take priority; ignored regions are consulted
        // only when no real match qualifies.
        let best_in = |want_ignored: bool, candidates: &[(&GroundTruth, bool)]| {
            let mut best: Option<(usize, f64)> = None;
            for (idx, (gt, used)) in candidates.iter().enumerate() {
                if *used || gt.ignored != want_ignored {
                    continue;
                }
                let overlap = iou(&det.bbox, &gt.bbox);
                if overlap >= iou_thr && best.is_none_or(|(_, b)| overlap > b) {
                    best = Some((idx, overlap));
                }
            }
            best
        };
        if let Some((idx, _)) = best_in(false, candidates) {
            candidates[idx].1 = true;
            outcomes.push((det.score, true));
        } else if let Some((idx, _)) = best_in(true, candidates) {
            // Falls inside an ignored region: neither TP nor FP.
            candidates[idx].1 = true;
        } else {
            outcomes.push((det.score, false));
        }
    }
    RankedMatches { outcomes, npos }
}

fn pr_points(m: &RankedMatches) -> Vec<PrPoint> {
    let mut tp = 0usize;
    let mut fp = 0usize;
    let mut points = Vec::with_capacity(m.outcomes.len());
    for &(score, matched) in &m.outcomes {
        if matched {
            tp += 1;
        } else {
            fp += 1;
        }
        points.push(PrPoint {
            recall: tp as f64 / m.npos as f64,
            precision: tp as f64 / (tp + fp) as f64,
            score,
        });
    }
    points
}

/// AP from cumulative PR points via the interpolated envelope.
fn ap_from_points(points: &[PrPoint], interp: ApInterpolation) -> f64 {
    if points.is_empty() {
        return 0.0;
    }
    // Envelope with sentinels: recall 0 on the left, precision 0 at the
    // right end.
    let mut mrec = Vec::with_capacity(points.len() + 2);
    let mut mpre = Vec::with_capacity(points.len() + 2);
    mrec.push(0.0);
    mpre.push(0.0);
    for p in points {
        mrec.push(p.recall);
        mpre.push(p.precision);
    }
    mrec.push(1.0);
    mpre.push(0.0);
    for i in (0..mpre.len() - 1).rev() {
        if mpre[i] < mpre[i + 1] {
            mpre[i] = mpre[i + 1];
        }
    }

    match interp {
        ApInterpolation::AllPoint => {
            let mut ap = 0.0;
            for i in 0..mrec.len() - 1 {
                if mrec[i + 1] != mrec[i] {
                    ap += (mrec[i + 1] - mrec[i]) * mpre[i + 1];
                }
            }
            ap
        }
        ApInterpolation::Points(n) => {
            assert!(n >= 2, "a sampled grid needs at least two points");
            let mut total = 0.0;
            for j in 0..n {
                let r = j as f64 / (n - 1) as f64;
                // Envelope precision at the first achieved recall >= r.
                let p = mrec
                    .iter()
                    .position(|&rec| rec >= r)
                    .map(|idx| mpre[idx])
                    .unwrap_or(0.0);
                total += p;
            }
            total / n as f64
        }
    }
}

/// Average precision of one class at one IoU threshold (exact-area
/// interpolation). Returns 0 when the class has no ground truth.
pub fn average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: usize,
    iou_thr: f64,
) -> f64 {
    average_precision_with(dets, gts, class_id, iou_thr, ApInterpolation::default())
}

pub fn average_precision_with(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: usize,
    iou_thr: f64,
    interp: ApInterpolation,
) -> f64 {
    let matches = rank_and_match(dets, gts, class_id, iou_thr);
    if matches.npos == 0 {
        return 0.0;
    }
    ap_from_points(&pr_points(&matches), interp)
}

pub(super) fn ground_truth_classes(gts: &[GroundTruth]) -> BTreeSet<usize> {
    gts.iter()
        .filter(|g| !g.ignored)
        .map(|g| g.class_id)
        .collect()
}

fn macro_ap(
    dets: &[Detection],
    gts: &[GroundTruth],
    classes: &BTreeSet<usize>,
    iou_thr: f64,
) -> f64 {
    if classes.is_empty() {
        return 0.0;
    }
    let sum: f64 = classes
        .iter()
        .map(|&c| average_precision(dets, gts, c, iou_thr))
        .sum();
    sum / classes.len() as f64
}

pub(super) fn macro_ap50(
    dets: &[Detection],
    gts: &[GroundTruth],
    classes: &BTreeSet<usize>,
) -> f64 {
    macro_ap(dets, gts, classes, 0.5)
}

/// Full evaluation with default options (all detections count toward
/// recall, matching IoU 0.5).
pub fn map_eval(dets: &[Detection], gts: &[GroundTruth]) -> Result<EvalResult, EvalError> {
    map_eval_with(dets, gts, &EvalOptions::default())
}

pub fn map_eval_with(
    dets: &[Detection],
    gts: &[GroundTruth],
    opts: &EvalOptions,
) -> Result<EvalResult, EvalError> {
    let classes = ground_truth_classes(gts);
    if classes.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }

    let mut per_class_ap50 = BTreeMap::new();
    let mut pr_curves = BTreeMap::new();
    for &class_id in &classes {
        let matches = rank_and_match(dets, gts, class_id, 0.5);
        let points = pr_points(&matches);
        per_class_ap50.insert(
            class_id,
            ap_from_points(&points, ApInterpolation::default()),
        );
        pr_curves.insert(class_id, points);
    }
    let map50 = per_class_ap50.values().sum::<f64>() / classes.len() as f64;

    let mut map5095 = 0.0;
    for step in 0..10 {
        let thr = 0.5 + 0.05 * step as f64;
        map5095 += macro_ap(dets, gts, &classes, thr);
    }
    map5095 /= 10.0;

    // Recall at the operating point: matched fraction of ground truths
    // over all classes, using detections above the confidence cut.
    let operating: Vec<Detection> = dets
        .iter()
        .filter(|d| d.score >= opts.conf_threshold)
        .cloned()
        .collect();
    let mut matched = 0usize;
    let mut total = 0usize;
    for &class_id in &classes {
        let m = rank_and_match(&operating, gts, class_id, opts.iou_threshold);
        matched += m.outcomes.iter().filter(|(_, hit)| *hit).count();
        total += m.npos;
    }
    let recall = if total == 0 {
        0.0
    } else {
        matched as f64 / total as f64
    };

    let n_classes = classes
        .iter()
        .max()
        .map(|&c| c + 1)
        .unwrap_or(0)
        .max(dets.iter().map(|d| d.class_id + 1).max().unwrap_or(0));
    let confusion =
        super::confusion::class_agnostic_confusion(&operating, gts, n_classes, opts.iou_threshold)
            .normalized;

    let size_breakdown = opts.image_size.map(|side| size_breakdown(dets, gts, side));

    Ok(EvalResult {
        map50,
        map5095,
        recall,
        per_class_ap50,
        pr_curves,
        confusion,
        size_breakdown,
    })
}

fn size_breakdown(dets: &[Detection], gts: &[GroundTruth], side: f64) -> SizeBreakdown {
    let bucket = |area_px: f64| -> usize {
        if area_px < 32.0 * 32.0 {
            0
        } else if area_px < 96.0 * 96.0 {
            1
        } else {
            2
        }
    };
    let mut aps = [None; 3];
    for (idx, slot) in aps.iter_mut().enumerate() {
        let slice_gts: Vec<GroundTruth> = gts
            .iter()
            .filter(|g| bucket(g.bbox.area() * side * side) == idx)
            .cloned()
            .collect();
        let classes = ground_truth_classes(&slice_gts);
        if classes.is_empty() {
            continue;
        }
        let slice_dets: Vec<Detection> = dets
            .iter()
            .filter(|d| bucket(d.bbox.area() * side * side) == idx)
            .cloned()
            .collect();
        *slot = Some(macro_ap(&slice_dets, &slice_gts, &classes, 0.5));
    }
    SizeBreakdown {
        ap50_small: aps[0],
        ap50_medium: aps[1],
        ap50_large: aps[2],
    }
}

/// Macro-F1 (and per-class F1) at each confidence cut, plus the best cut.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct F1Curve {
    pub thresholds: Vec<f64>,
    pub macro_f1: Vec<f64>,
    pub per_class: BTreeMap<usize, Vec<f64>>,
    pub best_threshold: f64,
    pub best_f1: f64,
}

/// Sweep confidence cuts and report per-class and macro F1 at each.
///
/// The best threshold is the first maximum of the macro curve in
/// ascending threshold order.
pub fn f1_confidence_sweep(
    dets: &[Detection],
    gts: &[GroundTruth],
    iou_thr: f64,
    grid: &[f64],
) -> Result<F1Curve, EvalError> {
    let classes = ground_truth_classes(gts);
    if classes.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let mut thresholds: Vec<f64> = grid.to_vec();
    thresholds.sort_by(f64::total_cmp);

    let mut per_class: BTreeMap<usize, Vec<f64>> = classes
        .iter()
        .map(|&c| (c, Vec::with_capacity(thresholds.len())))
        .collect();
    let mut macro_f1 = Vec::with_capacity(thresholds.len());

    for &thr in &thresholds {
        let cut: Vec<Detection> = dets.iter().filter(|d| d.score >= thr).cloned().collect();
        let mut sum = 0.0;
        for &class_id in &classes {
            let m = rank_and_match(&cut, gts, class_id, iou_thr);
            let tp = m.outcomes.iter().filter(|(_, hit)| *hit).count() as f64;
            let fp = m.outcomes.len() as f64 - tp;
            let f_n = m.npos as f64 - tp;
            let f1 = if tp == 0.0 {
                0.0
            } else {
                2.0 * tp / (2.0 * tp + fp + f_n)
            };
            per_class
                .get_mut(&class_id)
                .expect("class present")
                .push(f1);
            sum += f1;
        }
        macro_f1.push(sum / classes.len() as f64);
    }

    let mut best_idx = 0;
    for (i, &f1) in macro_f1.iter().enumerate() {
        if f1 > macro_f1[best_idx] {
            best_idx = i;
        }
    }
    Ok(F1Curve {
        best_threshold: thresholds[best_idx],
        best_f1: macro_f1[best_idx],
        thresholds,
        macro_f1,
        per_class,
    })
}
