//! Class-confusion accounting.
//!
//! Detections and ground truths are matched class-agnostically (best IoU
//! first, each box used once); a matched pair increments the cell
//! (true class, predicted class). Unmatched ground truths land in the
//! background column of their class row; unmatched detections land in the
//! background row of their predicted column. Every row with support is
//! normalized to sum to one.

use super::{Detection, GroundTruth, NmsConfig, nms};
use crate::bbox::iou;
use std::collections::BTreeMap;

/// Raw counts and the row-normalized matrix, both (K+1)×(K+1) with the
/// background as the last index.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionMatrix {
    pub counts: Vec<Vec<u64>>,
    pub normalized: Vec<Vec<f64>>,
    /// Matched pairs, missed ground truths, unmatched detections.
    pub matched: u64,
    pub missed: u64,
    pub spurious: u64,
}

/// Confusion matrix of the detections after NMS at `cfg`, matched
/// class-agnostically at `iou_thr`.
pub fn confusion_matrix(
    dets: &[Detection],
    gts: &[GroundTruth],
    n_classes: usize,
    cfg: &NmsConfig,
    iou_thr: f64,
) -> ConfusionMatrix {
    let survivors = nms(dets, cfg);
    class_agnostic_confusion(&survivors, gts, n_classes, iou_thr)
}

/// Confusion matrix of detections as given (already post-NMS).
pub(super) fn class_agnostic_confusion(
    dets: &[Detection],
    gts: &[GroundTruth],
    n_classes: usize,
    iou_thr: f64,
) -> ConfusionMatrix {
    let background = n_classes;
    let mut counts = vec![vec![0u64; n_classes + 1]; n_classes + 1];
    let mut matched = 0u64;
    let mut missed = 0u64;
    let mut spurious = 0u64;

    // Group by image; iterate images in sorted order for determinism.
    let mut images: BTreeMap<&str, (Vec<&GroundTruth>, Vec<&Detection>)> = BTreeMap::new();
    for gt in gts.iter().filter(|g| !g.ignored) {
        images.entry(gt.image_id.as_str()).or_default().0.push(gt);
    }
    for det in dets {
        images.entry(det.image_id.as_str()).or_default().1.push(det);
    }

    for (_, (image_gts, image_dets)) in images {
        // All qualifying pairs, best overlap first; ties resolve by input
        // order of ground truth, then detection.
        let mut pairs: Vec<(f64, usize, usize)> = Vec::new();
        for (gi, gt) in image_gts.iter().enumerate() {
            for (di, det) in image_dets.iter().enumerate() {
                let overlap = iou(&gt.bbox, &det.bbox);
                if overlap >= iou_thr {
                    pairs.push((overlap, gi, di));
                }
            }
        }
        pairs.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));

        let mut gt_used = vec![false; image_gts.len()];
        let mut det_used = vec![false; image_dets.len()];
        for (_, gi, di) in pairs {
            if gt_used[gi] || det_used[di] {
                continue;
            }
            gt_used[gi] = true;
            det_used[di] = true;
            counts[image_gts[gi].class_id][image_dets[di].class_id] += 1;
            matched += 1;
        }
        for (gi, used) in gt_used.iter().enumerate() {
            if !used {
                counts[image_gts[gi].class_id][background] += 1;
                missed += 1;
            }
        }
        for (di, used) in det_used.iter().enumerate() {
            if !used {
                counts[background][image_dets[di].class_id] += 1;
                spurious += 1;
            }
        }
    }

    let normalized = counts
        .iter()
        .map(|row| {
            let total: u64 = row.iter().sum();
            if total == 0 {
                vec![0.0; row.len()]
            } else {
                row.iter().map(|&c| c as f64 / total as f64).collect()
            }
        })
        .collect();

    ConfusionMatrix {
        counts,
        normalized,
        matched,
        missed,
        spurious,
    }
}
