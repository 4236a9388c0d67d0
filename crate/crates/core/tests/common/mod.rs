//! Test-only oracles, independent of the library's evaluation path.

use tinydet_core::bbox::BBox;
use tinydet_core::eval::{Detection, GroundTruth};

/// Overlap ratio recomputed from corner arithmetic.
fn raw_iou(a: &BBox, b: &BBox) -> f64 {
    let (ax1, ay1) = (a.cx() - a.w() / 2.0, a.cy() - a.h() / 2.0);
    let (ax2, ay2) = (a.cx() + a.w() / 2.0, a.cy() + a.h() / 2.0);
    let (bx1, by1) = (b.cx() - b.w() / 2.0, b.cy() - b.h() / 2.0);
    let (bx2, by2) = (b.cx() + b.w() / 2.0, b.cy() + b.h() / 2.0);
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    inter / (a.w() * a.h() + b.w() * b.h() - inter)
}

/// Naive average precision: greedy score-ordered matching rebuilt from
/// scratch, then the exact area under the interpolated precision
/// envelope, computed by direct scanning rather than envelope vectors.
pub fn oracle_average_precision(
    dets: &[Detection],
    gts: &[GroundTruth],
    class_id: usize,
    iou_thr: f64,
) -> f64 {
    let class_gts: Vec<&GroundTruth> = gts
        .iter()
        .filter(|g| g.class_id == class_id && !g.ignored)
        .collect();
    let npos = class_gts.len();
    if npos == 0 {
        return 0.0;
    }

    let mut ranked: Vec<&Detection> = dets.iter().filter(|d| d.class_id == class_id).collect();
    ranked.sort_by(|a, b| b.score.total_cmp(&a.score));

    let mut used = vec![false; class_gts.len()];
    let mut outcomes: Vec<bool> = Vec::with_capacity(ranked.len());
    for det in ranked {
        let mut best: Option<(usize, f64)> = None;
        for (gi, gt) in class_gts.iter().enumerate() {
            if used[gi] || gt.image_id != det.image_id {
                continue;
            }
            let overlap = raw_iou(&det.bbox, &gt.bbox);
            if overlap >= iou_thr && best.is_none_or(|(_, b)| overlap > b) {
                best = Some((gi, overlap));
            }
        }
        match best {
            Some((gi, _)) => {
                used[gi] = true;
                outcomes.push(true);
            }
            None => outcomes.push(false),
        }
    }

    // Cumulative PR points.
    let mut recalls = Vec::with_capacity(outcomes.len());
    let mut precisions = Vec::with_capacity(outcomes.len());
    let mut tp = 0usize;
    for (rank, hit) in outcomes.iter().enumerate() {
        if *hit {
            tp += 1;
        }
        recalls.push(tp as f64 / npos as f64);
        precisions.push(tp as f64 / (rank + 1) as f64);
    }

    // Exact envelope area: at every recall increase, the envelope height
    // is the best precision at or beyond that recall.
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (k, &recall) in recalls.iter().enumerate() {
        if recall > prev_recall {
            let mut env = 0.0;
            for &p in &precisions[k..] {
                if p > env {
                    env = p;
                }
            }
            ap += (recall - prev_recall) * env;
            prev_recall = recall;
        }
    }
    ap
}

/// Macro AP@0.5 over the classes present in the ground truth.
pub fn oracle_map50(dets: &[Detection], gts: &[GroundTruth]) -> f64 {
    let mut classes: Vec<usize> = gts
        .iter()
        .filter(|g| !g.ignored)
        .map(|g| g.class_id)
        .collect();
    classes.sort_unstable();
    classes.dedup();
    let sum: f64 = classes
        .iter()
        .map(|&c| oracle_average_precision(dets, gts, c, 0.5))
        .sum();
    sum / classes.len() as f64
}
