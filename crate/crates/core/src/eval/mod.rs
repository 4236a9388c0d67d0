//! Detection post-processing and evaluation.
//!
//! Greedy per-class NMS, COCO-style average precision with mAP@50 and
//! mAP@50-95, recall at an explicit operating point, F1-confidence
//! sweeps, normalized confusion matrices, and a grid-search tuner over
//! NMS thresholds. Reductions iterate images and classes in sorted order,
//! so results are deterministic regardless of input grouping.

mod ap;
mod confusion;

pub use ap::{
    ApInterpolation, EvalOptions, EvalResult, F1Curve, PrPoint, SizeBreakdown, average_precision,
    average_precision_with, f1_confidence_sweep, map_eval, map_eval_with,
};
pub use confusion::{ConfusionMatrix, confusion_matrix};

use crate::bbox::{BBox, iou};
use std::collections::BTreeMap;
use thiserror::Error;

/// A scored, class-labeled box attributed to an image.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
    pub score: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("ground truth is empty")]
    EmptyGroundTruth,
    #[error("detection score {0} outside [0, 1]")]
    ScoreOutOfRange(f64),
}

impl Detection {
    pub fn new(
        image_id: impl Into<String>,
        class_id: usize,
        bbox: BBox,
        score: f64,
    ) -> Result<Self, EvalError> {
        if !(0.0..=1.0).contains(&score) {
            return Err(EvalError::ScoreOutOfRange(score));
        }
        Ok(Detection {
            image_id: image_id.into(),
            class_id,
            bbox,
            score,
        })
    }
}

/// A labeled box attributed to an image. Ignored entries take part in
/// nothing: they are skipped by matching, AP and the confusion matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub image_id: String,
    pub class_id: usize,
    pub bbox: BBox,
    pub ignored: bool,
}

impl GroundTruth {
    pub fn new(image_id: impl Into<String>, class_id: usize, bbox: BBox) -> Self {
        GroundTruth {
            image_id: image_id.into(),
            class_id,
            bbox,
            ignored: false,
        }
    }
}

/// NMS operating point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NmsConfig {
    /// Detections below this score are dropped before suppression.
    pub conf_threshold: f64,
    /// A detection is suppressed when its IoU with a kept detection
    /// strictly exceeds this.
    pub iou_threshold: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            conf_threshold: 0.010,
            iou_threshold: 0.4,
        }
    }
}

/// Greedy per-(image, class) non-maximum suppression.
///
/// Within each group, detections are taken in descending score (ties keep
/// input order); a detection is dropped when it overlaps an already-kept
/// one with IoU strictly above the threshold. Output lists groups in
/// (image_id, class_id) order, kept detections in kept order.
pub fn nms(dets: &[Detection], cfg: &NmsConfig) -> Vec<Detection> {
    let mut groups: BTreeMap<(&str, usize), Vec<&Detection>> = BTreeMap::new();
    for det in dets {
        if det.score < cfg.conf_threshold {
            continue;
        }
        groups
            .entry((det.image_id.as_str(), det.class_id))
            .or_default()
            .push(det);
    }

    let mut kept = Vec::new();
    for (_, mut group) in groups {
        group.sort_by(|a, b| b.score.total_cmp(&a.score));
        let mut group_kept: Vec<&Detection> = Vec::new();
        'cand: for det in group {
            for survivor in &group_kept {
                if iou(&survivor.bbox, &det.bbox) > cfg.iou_threshold {
                    continue 'cand;
                }
            }
            group_kept.push(det);
        }
        kept.extend(group_kept.into_iter().cloned());
    }
    kept
}

/// One evaluated cell of the NMS grid search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSearchRow {
    pub conf_threshold: f64,
    pub iou_threshold: f64,
    pub map50: f64,
}

/// Evaluate mAP@50 after NMS for every (conf, iou) cell and rank the
/// table best-first. Ties break toward the smaller confidence threshold,
/// then the smaller IoU threshold.
pub fn grid_search_nms(
    dets: &[Detection],
    gts: &[GroundTruth],
    conf_grid: &[f64],
    iou_grid: &[f64],
) -> Result<Vec<GridSearchRow>, EvalError> {
    let classes = ap::ground_truth_classes(gts);
    if classes.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let mut rows = Vec::with_capacity(conf_grid.len() * iou_grid.len());
    for &conf_threshold in conf_grid {
        for &iou_threshold in iou_grid {
            let cfg = NmsConfig {
                conf_threshold,
                iou_threshold,
            };
            let survivors = nms(dets, &cfg);
            let result = ap::macro_ap50(&survivors, gts, &classes);
            rows.push(GridSearchRow {
                conf_threshold,
                iou_threshold,
                map50: result,
            });
        }
    }
    rows.sort_by(|a, b| {
        b.map50
            .total_cmp(&a.map50)
            .then(a.conf_threshold.total_cmp(&b.conf_threshold))
            .then(a.iou_threshold.total_cmp(&b.iou_threshold))
    });
    Ok(rows)
}
