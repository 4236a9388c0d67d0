//! Axis-aligned boxes and overlap-based regression losses.
//!
//! Boxes live in center format (cx, cy, w, h) with strictly positive size;
//! coordinates are dimensionless; callers decide whether they mean pixels
//! or normalized image units. The overlap losses (IoU and its GIoU / DIoU /
//! CIoU refinements) come with closed-form gradients with respect to the
//! predicted box, which is where their well-known failure mode shows up:
//! plain IoU has exactly zero gradient once the boxes stop overlapping.

use crate::dual::Dual4;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BoxError {
    #[error("box has non-finite coordinates ({cx}, {cy}, {w}, {h})")]
    NonFinite { cx: f64, cy: f64, w: f64, h: f64 },
    #[error("box size must be strictly positive, got w={w}, h={h}")]
    DegenerateSize { w: f64, h: f64 },
    #[error("corner box requires x1 < x2 and y1 < y2, got ({x1}, {y1}, {x2}, {y2})")]
    BadCorners { x1: f64, y1: f64, x2: f64, y2: f64 },
}

/// Center-format box: (cx, cy) is the center, (w, h) the full extent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BBox {
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self, BoxError> {
        if !(cx.is_finite() && cy.is_finite() && w.is_finite() && h.is_finite()) {
            return Err(BoxError::NonFinite { cx, cy, w, h });
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(BoxError::DegenerateSize { w, h });
        }
        Ok(BBox { cx, cy, w, h })
    }

    pub fn cx(&self) -> f64 {
        self.cx
    }

    pub fn cy(&self) -> f64 {
        self.cy
    }

    pub fn w(&self) -> f64 {
        self.w
    }

    pub fn h(&self) -> f64 {
        self.h
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn to_corners(&self) -> CornerBox {
        CornerBox {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    /// The box as a parameter vector, in tangent-slot order.
    pub fn params(&self) -> [f64; 4] {
        [self.cx, self.cy, self.w, self.h]
    }

    pub fn from_params(p: [f64; 4]) -> Result<Self, BoxError> {
        BBox::new(p[0], p[1], p[2], p[3])
    }
}

/// Corner-format box with x1 < x2 and y1 < y2.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CornerBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self, BoxError> {
        if !(x1.is_finite() && y1.is_finite() && x2.is_finite() && y2.is_finite()) {
            return Err(BoxError::NonFinite {
                cx: x1,
                cy: y1,
                w: x2,
                h: y2,
            });
        }
        if x1 >= x2 || y1 >= y2 {
            return Err(BoxError::BadCorners { x1, y1, x2, y2 });
        }
        Ok(CornerBox { x1, y1, x2, y2 })
    }

    pub fn to_center(&self) -> BBox {
        BBox {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn area(&self) -> f64 {
        (self.x2 - self.x1) * (self.y2 - self.y1)
    }
}

/// Intersection-over-union of two boxes, in [0, 1].
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let ca = a.to_corners();
    let cb = b.to_corners();
    let iw = (ca.x2.min(cb.x2) - ca.x1.max(cb.x1)).max(0.0);
    let ih = (ca.y2.min(cb.y2) - ca.y1.max(cb.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    inter / union
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IouVariant {
    Iou,
    GIou,
    DIou,
    CIou,
}

impl IouVariant {
    pub const ALL: [IouVariant; 4] = [
        IouVariant::Iou,
        IouVariant::GIou,
        IouVariant::DIou,
        IouVariant::CIou,
    ];
}

/// A loss value together with its gradient with respect to the predicted
/// box parameters (cx, cy, w, h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: [f64; 4],
}

impl LossValue {
    pub fn grad_norm(&self) -> f64 {
        self.grad.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Overlap metric value without gradients (IoU / GIoU / DIoU / CIoU).
pub fn overlap_metric(a: &BBox, b: &BBox, variant: IouVariant) -> f64 {
    metric_dual(a, b, variant, None).v
}

/// Loss `1 - metric(variant)` with its analytic gradient.
///
/// The CIoU aspect-ratio coupling α = v / (1 - IoU + v) is held constant
/// during differentiation, the convention of the original CIoU
/// formulation; the value itself uses the live α. At an exactly identical
/// pair the loss sits at its (non-smooth) minimum and the gradient is
/// defined as zero.
pub fn overlap_loss(pred: &BBox, tgt: &BBox, variant: IouVariant) -> LossValue {
    if pred == tgt {
        return LossValue {
            value: 0.0,
            grad: [0.0; 4],
        };
    }
    let m = metric_dual(pred, tgt, variant, None);
    LossValue {
        value: 1.0 - m.v,
        grad: m.d.map(|g| -g),
    }
}

/// CIoU loss value with the aspect coupling pinned to `alpha`.
///
/// This is the objective whose exact derivative the analytic CIoU gradient
/// is; the finite-difference harness probes it instead of the live-α value
/// so that the check verifies the stated differentiation convention.
pub(crate) fn ciou_loss_value_frozen_alpha(pred: &BBox, tgt: &BBox, alpha: f64) -> f64 {
    if pred == tgt {
        return 0.0;
    }
    1.0 - metric_dual(pred, tgt, IouVariant::CIou, Some(alpha)).v
}

/// The live α used by the CIoU value at this pair (zero when the aspect
/// term vanishes).
pub(crate) fn ciou_alpha(pred: &BBox, tgt: &BBox) -> f64 {
    let (iou_d, _, _, _) = iou_dual_parts(pred, tgt);
    let v = aspect_term(pred, tgt).v;
    if v == 0.0 {
        0.0
    } else {
        v / (1.0 - iou_d.v + v)
    }
}

fn pred_duals(pred: &BBox) -> (Dual4, Dual4, Dual4, Dual4) {
    (
        Dual4::var(pred.cx, 0),
        Dual4::var(pred.cy, 1),
        Dual4::var(pred.w, 2),
        Dual4::var(pred.h, 3),
    )
}

/// IoU as a dual plus the enclosing-box extents needed by the refinements.
fn iou_dual_parts(pred: &BBox, tgt: &BBox) -> (Dual4, Dual4, Dual4, Dual4) {
    let (px, py, pw, ph) = pred_duals(pred);
    let half = Dual4::constant(0.5);
    let px1 = px - pw * half;
    let px2 = px + pw * half;
    let py1 = py - ph * half;
    let py2 = py + ph * half;
    let tc = tgt.to_corners();
    let (tx1, ty1, tx2, ty2) = (
        Dual4::constant(tc.x1),
        Dual4::constant(tc.y1),
        Dual4::constant(tc.x2),
        Dual4::constant(tc.y2),
    );

    let iw = (px2.min(tx2) - px1.max(tx1)).clamp_non_negative();
    let ih = (py2.min(ty2) - py1.max(ty1)).clamp_non_negative();
    let inter = iw * ih;
    let union = pw * ph + Dual4::constant(tgt.area()) - inter;
    let iou = inter / union;

    let enclose_w = px2.max(tx2) - px1.min(tx1);
    let enclose_h = py2.max(ty2) - py1.min(ty1);
    (iou, union, enclose_w, enclose_h)
}

/// The squared-arctan aspect mismatch term of CIoU.
fn aspect_term(pred: &BBox, tgt: &BBox) -> Dual4 {
    let (_, _, pw, ph) = pred_duals(pred);
    let target_angle = Dual4::constant((tgt.w / tgt.h).atan());
    let q = target_angle - (pw / ph).atan();
    q.sqr()
        .scale(4.0 / (std::f64::consts::PI * std::f64::consts::PI))
}

fn metric_dual(pred: &BBox, tgt: &BBox, variant: IouVariant, alpha_override: Option<f64>) -> Dual4 {
    let (iou, union, enclose_w, enclose_h) = iou_dual_parts(pred, tgt);
    match variant {
        IouVariant::Iou => iou,
        IouVariant::GIou => {
            let enclose_area = enclose_w * enclose_h;
            iou - (enclose_area - union) / enclose_area
        }
        IouVariant::DIou => iou - center_distance_ratio(pred, tgt, enclose_w, enclose_h),
        IouVariant::CIou => {
            let dist = center_distance_ratio(pred, tgt, enclose_w, enclose_h);
            let v = aspect_term(pred, tgt);
            let alpha = alpha_override.unwrap_or_else(|| {
                if v.v == 0.0 {
                    0.0
                } else {
                    v.v / (1.0 - iou.v + v.v)
                }
            });
            iou - dist - v.scale(alpha)
        }
    }
}

/// ρ²/c²: squared center distance over squared enclosing-box diagonal.
fn center_distance_ratio(pred: &BBox, tgt: &BBox, enclose_w: Dual4, enclose_h: Dual4) -> Dual4 {
    let (px, py, _, _) = pred_duals(pred);
    let dx = px - Dual4::constant(tgt.cx);
    let dy = py - Dual4::constant(tgt.cy);
    let rho2 = dx.sqr() + dy.sqr();
    let c2 = enclose_w.sqr() + enclose_h.sqr();
    rho2 / c2
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bb(cx: f64, cy: f64, w: f64, h: f64) -> BBox {
        BBox::new(cx, cy, w, h).unwrap()
    }

    #[test]
    fn rejects_degenerate_and_non_finite() {
        assert_eq!(
            BBox::new(0.0, 0.0, 0.0, 1.0),
            Err(BoxError::DegenerateSize { w: 0.0, h: 1.0 })
        );
        assert_eq!(
            BBox::new(0.0, 0.0, -2.0, 1.0),
            Err(BoxError::DegenerateSize { w: -2.0, h: 1.0 })
        );
        assert!(matches!(
            BBox::new(f64::NAN, 0.0, 1.0, 1.0),
            Err(BoxError::NonFinite { .. })
        ));
    }

    #[test]
    fn corner_conversion_cases() {
        let c = bb(1.0, 1.0, 2.0, 2.0).to_corners();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 2.0, 2.0));
        let c = bb(0.5, 0.5, 1.0, 1.0).to_corners();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (0.0, 0.0, 1.0, 1.0));
        // Hand arithmetic: (3, 4) center with 10x10 extent.
        let c = bb(3.0, 4.0, 10.0, 10.0).to_corners();
        assert_eq!((c.x1, c.y1, c.x2, c.y2), (-2.0, -1.0, 8.0, 9.0));
    }

    #[test]
    fn corner_round_trip_and_area() {
        let b = bb(0.31, 0.72, 0.05, 0.41);
        let c = b.to_corners();
        let back = c.to_center();
        for (x, y) in b.params().iter().zip(back.params()) {
            assert!((x - y).abs() <= 1e-15 * x.abs().max(1.0));
        }
        assert!((c.area() - b.area()).abs() < 1e-15);
    }

    #[test]
    fn iou_identity_disjoint_and_hand_case() {
        let a = bb(0.5, 0.5, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);

        // Corner boxes (0,0,2,2) and (1,0,3,2): inter 2, union 6.
        let p = CornerBox::new(0.0, 0.0, 2.0, 2.0).unwrap().to_center();
        let q = CornerBox::new(1.0, 0.0, 3.0, 2.0).unwrap().to_center();
        assert!((iou(&p, &q) - 1.0 / 3.0).abs() < 1e-12);

        let far = bb(10.5, 0.5, 5.0, 5.0);
        let near = bb(0.5, 0.5, 5.0, 5.0);
        assert_eq!(iou(&near, &far), 0.0);
    }

    #[test]
    fn identical_pair_loss_is_zero_for_every_variant() {
        let b = bb(0.4, 0.6, 0.2, 0.1);
        for variant in IouVariant::ALL {
            let l = overlap_loss(&b, &b, variant);
            assert_eq!(l.value, 0.0, "{variant:?}");
            assert_eq!(l.grad, [0.0; 4], "{variant:?}");
        }
    }

    #[test]
    fn disjoint_plain_iou_gradient_is_exactly_zero() {
        let pred = bb(0.2, 0.2, 0.05, 0.05);
        let tgt = bb(0.8, 0.8, 0.05, 0.05);
        let l = overlap_loss(&pred, &tgt, IouVariant::Iou);
        assert_eq!(l.value, 1.0);
        assert_eq!(l.grad, [0.0; 4]);
    }

    #[test]
    fn disjoint_diou_and_ciou_gradients_are_nonzero_and_match_differences() {
        let pred = bb(0.2, 0.2, 0.05, 0.05);
        let tgt = bb(0.8, 0.8, 0.05, 0.08);
        for variant in [IouVariant::DIou, IouVariant::CIou] {
            let l = overlap_loss(&pred, &tgt, variant);
            assert!(l.grad_norm() > 0.0, "{variant:?}");
            assert!(l.value > 1.0, "distance penalty pushes the loss above 1");

            // Central differences at step 1e-5; the pair is far from any
            // branch point. CIoU differentiates with its aspect coupling
            // frozen, so the probe pins it too.
            let alpha = ciou_alpha(&pred, &tgt);
            let step = 1e-5;
            for k in 0..4 {
                let probe = |delta: f64| {
                    let mut p = pred.params();
                    p[k] += delta;
                    let b = BBox::from_params(p).unwrap();
                    match variant {
                        IouVariant::CIou => ciou_loss_value_frozen_alpha(&b, &tgt, alpha),
                        _ => overlap_loss(&b, &tgt, variant).value,
                    }
                };
                let fd = (probe(step) - probe(-step)) / (2.0 * step);
                let rel = (l.grad[k] - fd).abs() / l.grad[k].abs().max(fd.abs()).max(1.0);
                assert!(
                    rel < 1e-4,
                    "{variant:?} slot {k}: analytic {} fd {}",
                    l.grad[k],
                    fd
                );
            }
        }
    }

    #[test]
    fn metric_ranges() {
        let pred = bb(0.3, 0.3, 0.2, 0.3);
        let tgt = bb(0.6, 0.5, 0.25, 0.2);
        let i = overlap_metric(&pred, &tgt, IouVariant::Iou);
        assert!((0.0..=1.0).contains(&i));
        let g = overlap_metric(&pred, &tgt, IouVariant::GIou);
        assert!(g > -1.0 && g <= 1.0);
    }
}
