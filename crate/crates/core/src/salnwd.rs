//! Gaussian-box Wasserstein distance and the size-adaptive hybrid loss.
//!
//! A box is modeled as an axis-aligned 2-D Gaussian with mean at the box
//! center and per-axis deviation of half the extent. The squared
//! Wasserstein-2 distance between two such Gaussians reduces to
//!
//! ```text
//! W²(a, b) = ‖μ_a − μ_b‖² + ‖σ_a − σ_b‖²
//! ```
//!
//! which is exponentiated into the similarity `NWD = exp(−√W² / C)`. The
//! NWD loss `1 − NWD` stays strictly positive and keeps a nonzero
//! gradient for disjoint pairs, the property plain IoU lacks. The hybrid
//! batch loss blends the NWD loss with a CIoU loss reweighted by inverse
//! target area, so tiny targets dominate the geometric term.
//!
//! Coordinates are dimensionless; with normalized coordinates in [0, 1]
//! the default area floor ε = 1e-4 corresponds to roughly a 1% × 1% box.

use crate::bbox::{BBox, IouVariant, LossValue, overlap_loss};
use crate::dual::Dual4;
use thiserror::Error;

/// Axis-aligned Gaussian model of a box: `mu` is the center, `sigma` the
/// per-axis deviation (w/2, h/2).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBox {
    pub mu: [f64; 2],
    pub sigma: [f64; 2],
}

/// How the inverse-area weights enter the hybrid loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightMode {
    /// The batch-mean weight scales the batch-mean CIoU term:
    /// `total = λ·mean(L_NWD) + (1−λ)·mean(L_CIoU)·w̄`.
    MeanScaled,
    /// Each pair carries its own weight inside the mean:
    /// `total = mean(λ·L_NWD_i + (1−λ)·w'_i·L_CIoU_i)`.
    PerBox,
}

/// Optional normalization of per-box weights (PerBox mode only).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WeightNormalization {
    /// Raw inverse-area weights.
    None,
    /// Weights divided by their batch mean, so the average multiplier is 1.
    BatchMean,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SalNwdConfig {
    /// Blend factor: 0 is pure weighted CIoU, 1 is pure NWD.
    pub lambda: f64,
    /// Wasserstein normalization constant.
    pub c: f64,
    /// Area floor in the inverse-area weights.
    pub epsilon: f64,
    pub weight_mode: WeightMode,
    pub weight_normalization: WeightNormalization,
}

impl Default for SalNwdConfig {
    fn default() -> Self {
        SalNwdConfig {
            lambda: 0.5,
            c: 12.8,
            epsilon: 1e-4,
            weight_mode: WeightMode::MeanScaled,
            weight_normalization: WeightNormalization::None,
        }
    }
}

/// Per-batch decomposition of the hybrid loss.
///
/// In `MeanScaled` mode the identity
/// `total = λ·nwd_term + (1−λ)·ciou_term·mean_weight` holds to rounding.
#[derive(Debug, Clone, PartialEq)]
pub struct LossBreakdown {
    /// Mean NWD loss over the batch.
    pub nwd_term: f64,
    /// Mean (unweighted) CIoU loss over the batch.
    pub ciou_term: f64,
    /// Mean inverse-area weight of the targets.
    pub mean_weight: f64,
    pub total: f64,
    /// ∂total/∂(cx, cy, w, h) for every predicted box.
    pub grads: Vec<[f64; 4]>,
}

#[derive(Debug, Error, PartialEq)]
pub enum BatchError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("batch lengths differ: {preds} predictions vs {tgts} targets")]
    LengthMismatch { preds: usize, tgts: usize },
}

/// Gaussian model of a box: mean at the center, deviation (w/2, h/2).
pub fn to_gaussian(b: &BBox) -> GaussianBox {
    GaussianBox {
        mu: [b.cx(), b.cy()],
        sigma: [b.w() / 2.0, b.h() / 2.0],
    }
}

/// Squared Wasserstein-2 distance between two axis-aligned Gaussians.
pub fn wasserstein2_sq(a: &GaussianBox, b: &GaussianBox) -> f64 {
    let dmu0 = a.mu[0] - b.mu[0];
    let dmu1 = a.mu[1] - b.mu[1];
    let ds0 = a.sigma[0] - b.sigma[0];
    let ds1 = a.sigma[1] - b.sigma[1];
    dmu0 * dmu0 + dmu1 * dmu1 + ds0 * ds0 + ds1 * ds1
}

/// Normalized Wasserstein similarity `exp(−√W² / C)`, in (0, 1].
pub fn nwd(a: &BBox, b: &BBox, c: f64) -> f64 {
    (-wasserstein2_sq(&to_gaussian(a), &to_gaussian(b)).sqrt() / c).exp()
}

/// NWD loss `1 − NWD(pred, tgt)` with its analytic gradient.
///
/// The gradient is nonzero whenever the boxes differ at all; at an exact
/// match the loss sits at its minimum and the gradient is zero.
pub fn nwd_loss(pred: &BBox, tgt: &BBox, c: f64) -> LossValue {
    let d = nwd_dual(pred, tgt, c);
    LossValue {
        value: 1.0 - d.v,
        grad: d.d.map(|g| -g),
    }
}

/// Inverse-area size weight `1 / (w·h + ε)`.
pub fn size_weight(b: &BBox, epsilon: f64) -> f64 {
    1.0 / (b.area() + epsilon)
}

/// Hybrid loss over a batch of pre-assigned (prediction, target) pairs.
///
/// Weights come from target areas only, so no gradient flows through
/// them. Reduction is sequential in input order; results are
/// deterministic down to the bit.
pub fn sal_nwd_batch(
    preds: &[BBox],
    tgts: &[BBox],
    cfg: &SalNwdConfig,
) -> Result<LossBreakdown, BatchError> {
    check_paired(preds, tgts)?;
    let n = preds.len() as f64;

    let mut nwd_sum = 0.0;
    let mut ciou_sum = 0.0;
    let mut weight_sum = 0.0;
    let mut per_pair: Vec<(LossValue, LossValue, f64)> = Vec::with_capacity(preds.len());
    for (pred, tgt) in preds.iter().zip(tgts) {
        let nwd_l = nwd_loss(pred, tgt, cfg.c);
        let ciou_l = overlap_loss(pred, tgt, IouVariant::CIou);
        let w = size_weight(tgt, cfg.epsilon);
        nwd_sum += nwd_l.value;
        ciou_sum += ciou_l.value;
        weight_sum += w;
        per_pair.push((nwd_l, ciou_l, w));
    }
    let nwd_term = nwd_sum / n;
    let ciou_term = ciou_sum / n;
    let mean_weight = weight_sum / n;

    let lam = cfg.lambda;
    let mut grads = Vec::with_capacity(per_pair.len());
    let total = match cfg.weight_mode {
        WeightMode::MeanScaled => {
            for (nwd_l, ciou_l, _) in &per_pair {
                let mut g = [0.0; 4];
                for (k, slot) in g.iter_mut().enumerate() {
                    *slot = (lam * nwd_l.grad[k] + (1.0 - lam) * mean_weight * ciou_l.grad[k]) / n;
                }
                grads.push(g);
            }
            lam * nwd_term + (1.0 - lam) * ciou_term * mean_weight
        }
        WeightMode::PerBox => {
            let norm = match cfg.weight_normalization {
                WeightNormalization::None => 1.0,
                WeightNormalization::BatchMean => mean_weight,
            };
            let mut total_sum = 0.0;
            for (nwd_l, ciou_l, w) in &per_pair {
                let w_eff = w / norm;
                total_sum += lam * nwd_l.value + (1.0 - lam) * w_eff * ciou_l.value;
                let mut g = [0.0; 4];
                for (k, slot) in g.iter_mut().enumerate() {
                    *slot = (lam * nwd_l.grad[k] + (1.0 - lam) * w_eff * ciou_l.grad[k]) / n;
                }
                grads.push(g);
            }
            total_sum / n
        }
    };

    Ok(LossBreakdown {
        nwd_term,
        ciou_term,
        mean_weight,
        total,
        grads,
    })
}

/// Batch total with each pair's CIoU aspect coupling pinned to the given
/// α values. Finite-difference probes use this so they differentiate the
/// same objective the analytic gradients describe.
pub(crate) fn sal_nwd_total_frozen_alpha(
    preds: &[BBox],
    tgts: &[BBox],
    cfg: &SalNwdConfig,
    alphas: &[f64],
) -> f64 {
    let n = preds.len() as f64;
    let lam = cfg.lambda;
    match cfg.weight_mode {
        WeightMode::MeanScaled => {
            let mut nwd_sum = 0.0;
            let mut ciou_sum = 0.0;
            let mut weight_sum = 0.0;
            for ((pred, tgt), &alpha) in preds.iter().zip(tgts).zip(alphas) {
                nwd_sum += 1.0 - nwd(pred, tgt, cfg.c);
                ciou_sum += crate::bbox::ciou_loss_value_frozen_alpha(pred, tgt, alpha);
                weight_sum += size_weight(tgt, cfg.epsilon);
            }
            lam * (nwd_sum / n) + (1.0 - lam) * (ciou_sum / n) * (weight_sum / n)
        }
        WeightMode::PerBox => {
            let norm = match cfg.weight_normalization {
                WeightNormalization::None => 1.0,
                WeightNormalization::BatchMean => {
                    tgts.iter()
                        .map(|t| size_weight(t, cfg.epsilon))
                        .sum::<f64>()
                        / n
                }
            };
            let mut total = 0.0;
            for ((pred, tgt), &alpha) in preds.iter().zip(tgts).zip(alphas) {
                let w_eff = size_weight(tgt, cfg.epsilon) / norm;
                total += lam * (1.0 - nwd(pred, tgt, cfg.c))
                    + (1.0 - lam)
                        * w_eff
                        * crate::bbox::ciou_loss_value_frozen_alpha(pred, tgt, alpha);
            }
            total / n
        }
    }
}

pub(crate) fn pair_alphas(preds: &[BBox], tgts: &[BBox]) -> Vec<f64> {
    preds
        .iter()
        .zip(tgts)
        .map(|(p, t)| crate::bbox::ciou_alpha(p, t))
        .collect()
}

fn check_paired(preds: &[BBox], tgts: &[BBox]) -> Result<(), BatchError> {
    if preds.is_empty() || tgts.is_empty() {
        return Err(BatchError::EmptyBatch);
    }
    if preds.len() != tgts.len() {
        return Err(BatchError::LengthMismatch {
            preds: preds.len(),
            tgts: tgts.len(),
        });
    }
    Ok(())
}

fn nwd_dual(pred: &BBox, tgt: &BBox, c: f64) -> Dual4 {
    let px = Dual4::var(pred.cx(), 0);
    let py = Dual4::var(pred.cy(), 1);
    let pw = Dual4::var(pred.w(), 2);
    let ph = Dual4::var(pred.h(), 3);
    let half = Dual4::constant(0.5);
    let g = to_gaussian(tgt);
    let w2 = (px - Dual4::constant(g.mu[0])).sqr()
        + (py - Dual4::constant(g.mu[1])).sqr()
        + (pw * half - Dual4::constant(g.sigma[0])).sqr()
        + (ph * half - Dual4::constant(g.sigma[1])).sqr();
    (-w2.sqrt().scale(1.0 / c)).exp()
}
