//! Central finite-difference verification of the analytic gradients.
//!
//! Every closed-form gradient in this crate is held against a numeric
//! derivative of the matching scalar objective. Two conventions matter:
//!
//! - the CIoU checks probe the objective with the aspect coupling α
//!   pinned at the unperturbed point, because that is the function the
//!   analytic gradient differentiates (α is a constant under the stated
//!   convention, while the live value recomputes it);
//! - sampled pairs are kept away from the measure-zero kink set (corner
//!   coordinates closer than the exclusion margin, or near-identical
//!   boxes), where one-sided derivatives and central differences
//!   legitimately disagree.
//!
//! Errors are relative with a unit floor:
//! `|a − f| / max(|a|, |f|, 1)`.

use crate::bbox::{BBox, IouVariant, overlap_loss};
use crate::rng::seeded_rng;
use crate::salnwd::{SalNwdConfig, nwd_loss, sal_nwd_batch};
use rand::RngExt;
use rand_chacha::ChaCha8Rng;

/// Default central-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Margin under which two corner coordinates count as touching; pairs
/// inside it are resampled so the probe never straddles a branch point.
/// Chosen at 20x the step so the stencil stays on one branch.
pub const KINK_MARGIN: f64 = 2e-4;

/// Outcome of a gradient check run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub trials: usize,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
}

impl GradCheckReport {
    fn fold(&mut self, analytic: &[f64], numeric: &[f64]) {
        for (a, f) in analytic.iter().zip(numeric) {
            let abs = (a - f).abs();
            let rel = abs / a.abs().max(f.abs()).max(1.0);
            self.max_abs_err = self.max_abs_err.max(abs);
            self.max_rel_err = self.max_rel_err.max(rel);
        }
    }
}

/// Central difference of `f` along each box parameter.
pub fn central_diff<F: Fn(&BBox) -> f64>(f: F, b: &BBox, step: f64) -> [f64; 4] {
    let p = b.params();
    let mut grad = [0.0; 4];
    for (k, g) in grad.iter_mut().enumerate() {
        let mut hi = p;
        hi[k] += step;
        let mut lo = p;
        lo[k] -= step;
        let f_hi = f(&BBox::from_params(hi).expect("perturbation keeps the box valid"));
        let f_lo = f(&BBox::from_params(lo).expect("perturbation keeps the box valid"));
        *g = (f_hi - f_lo) / (2.0 * step);
    }
    grad
}

fn random_box(rng: &mut ChaCha8Rng) -> BBox {
    let w = rng.random_range(0.02..0.3);
    let h = rng.random_range(0.02..0.3);
    let cx = rng.random_range(0.1..0.9);
    let cy = rng.random_range(0.1..0.9);
    BBox::new(cx, cy, w, h).expect("sampled sizes are positive")
}

/// All eight cross-corner coordinate differences stay outside the margin.
fn clear_of_kinks(a: &BBox, b: &BBox, margin: f64) -> bool {
    let ca = a.to_corners();
    let cb = b.to_corners();
    for pa in [ca.x1, ca.x2] {
        for pb in [cb.x1, cb.x2] {
            if (pa - pb).abs() < margin {
                return false;
            }
        }
    }
    for pa in [ca.y1, ca.y2] {
        for pb in [cb.y1, cb.y2] {
            if (pa - pb).abs() < margin {
                return false;
            }
        }
    }
    true
}

fn sample_pair(rng: &mut ChaCha8Rng) -> (BBox, BBox) {
    loop {
        let a = random_box(rng);
        let b = random_box(rng);
        if clear_of_kinks(&a, &b, KINK_MARGIN) {
            return (a, b);
        }
    }
}

fn sample_separated_pair(rng: &mut ChaCha8Rng) -> (BBox, BBox) {
    loop {
        let (a, b) = sample_pair(rng);
        let g = crate::salnwd::wasserstein2_sq(
            &crate::salnwd::to_gaussian(&a),
            &crate::salnwd::to_gaussian(&b),
        );
        if g > 1e-6 {
            return (a, b);
        }
    }
}

/// Check the analytic gradient of one overlap-loss variant on random
/// pairs.
pub fn check_overlap_grads(
    variant: IouVariant,
    n_pairs: usize,
    seed: u64,
    step: f64,
) -> GradCheckReport {
    let mut rng = seeded_rng(seed);
    let mut report = GradCheckReport {
        trials: n_pairs,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    for _ in 0..n_pairs {
        let (pred, tgt) = sample_pair(&mut rng);
        let analytic = overlap_loss(&pred, &tgt, variant);
        let numeric = match variant {
            IouVariant::CIou => {
                let alpha = crate::bbox::ciou_alpha(&pred, &tgt);
                central_diff(
                    |b| crate::bbox::ciou_loss_value_frozen_alpha(b, &tgt, alpha),
                    &pred,
                    step,
                )
            }
            _ => central_diff(|b| overlap_loss(b, &tgt, variant).value, &pred, step),
        };
        report.fold(&analytic.grad, &numeric);
    }
    report
}

/// Check the NWD loss gradient on random pairs.
pub fn check_nwd_grads(c: f64, n_pairs: usize, seed: u64, step: f64) -> GradCheckReport {
    let mut rng = seeded_rng(seed);
    let mut report = GradCheckReport {
        trials: n_pairs,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    for _ in 0..n_pairs {
        let (pred, tgt) = sample_separated_pair(&mut rng);
        let analytic = nwd_loss(&pred, &tgt, c);
        let numeric = central_diff(|b| nwd_loss(b, &tgt, c).value, &pred, step);
        report.fold(&analytic.grad, &numeric);
    }
    report
}

/// Check the batched hybrid-loss gradients on random batches.
///
/// Each trial draws a batch of up to six pairs, perturbs every parameter
/// of every predicted box, and differences the batch total (with each
/// pair's α pinned, see the module docs).
pub fn sal_nwd_grad_check(cfg: &SalNwdConfig, n_trials: usize, seed: u64) -> GradCheckReport {
    let step = DEFAULT_STEP;
    let mut rng = seeded_rng(seed);
    let mut report = GradCheckReport {
        trials: n_trials,
        max_rel_err: 0.0,
        max_abs_err: 0.0,
    };
    for _ in 0..n_trials {
        let size = rng.random_range(1..=6usize);
        let mut preds = Vec::with_capacity(size);
        let mut tgts = Vec::with_capacity(size);
        for _ in 0..size {
            let (p, t) = sample_separated_pair(&mut rng);
            preds.push(p);
            tgts.push(t);
        }
        let analytic = sal_nwd_batch(&preds, &tgts, cfg).expect("batch is non-empty and paired");
        let alphas = crate::salnwd::pair_alphas(&preds, &tgts);

        for i in 0..size {
            let mut numeric = [0.0; 4];
            for (k, slot) in numeric.iter_mut().enumerate() {
                let mut hi = preds.clone();
                let mut p = hi[i].params();
                p[k] += step;
                hi[i] = BBox::from_params(p).expect("perturbed box stays valid");
                let mut lo = preds.clone();
                let mut p = lo[i].params();
                p[k] -= step;
                lo[i] = BBox::from_params(p).expect("perturbed box stays valid");
                let f_hi = crate::salnwd::sal_nwd_total_frozen_alpha(&hi, &tgts, cfg, &alphas);
                let f_lo = crate::salnwd::sal_nwd_total_frozen_alpha(&lo, &tgts, cfg, &alphas);
                *slot = (f_hi - f_lo) / (2.0 * step);
            }
            report.fold(&analytic.grads[i], &numeric);
        }
    }
    report
}
