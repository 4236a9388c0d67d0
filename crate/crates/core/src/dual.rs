//! Forward-mode scalar carrying four partial derivatives.
//!
//! The box losses differentiate with respect to the predicted box
//! parameters (cx, cy, w, h), so a fixed-width tangent of four slots is
//! enough. Target boxes enter as constants. Branch points pick one-sided
//! derivatives:
//!
//! - `max`/`min` follow the argument that wins the value comparison
//!   (first argument on ties);
//! - `clamp_non_negative` returns an exact zero (value and tangent) on the
//!   non-positive branch, which is what makes disjoint plain-IoU gradients
//!   vanish bitwise;
//! - `sqrt` at zero uses derivative zero, the symmetric-minimum convention.
//!
//! Configurations sitting exactly on a branch boundary are excluded from
//! the gradient-accuracy claims (see the gradcheck module).

use std::ops::{Add, Div, Mul, Neg, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Dual4 {
    pub v: f64,
    pub d: [f64; 4],
}

pub(crate) const ZERO: Dual4 = Dual4 {
    v: 0.0,
    d: [0.0; 4],
};

impl Dual4 {
    pub fn constant(v: f64) -> Self {
        Dual4 { v, d: [0.0; 4] }
    }

    /// Independent variable occupying tangent slot `slot`.
    pub fn var(v: f64, slot: usize) -> Self {
        let mut d = [0.0; 4];
        d[slot] = 1.0;
        Dual4 { v, d }
    }

    pub fn max(self, other: Self) -> Self {
        if self.v >= other.v { self } else { other }
    }

    pub fn min(self, other: Self) -> Self {
        if self.v <= other.v { self } else { other }
    }

    /// `max(self, 0)` with an exact zero on the non-positive branch.
    pub fn clamp_non_negative(self) -> Self {
        if self.v > 0.0 { self } else { ZERO }
    }

    pub fn sqr(self) -> Self {
        self * self
    }

    pub fn sqrt(self) -> Self {
        let v = self.v.sqrt();
        if self.v > 0.0 {
            let scale = 0.5 / v;
            Dual4 {
                v,
                d: self.d.map(|t| t * scale),
            }
        } else {
            Dual4 { v, d: [0.0; 4] }
        }
    }

    pub fn exp(self) -> Self {
        let v = self.v.exp();
        Dual4 {
            v,
            d: self.d.map(|t| t * v),
        }
    }

    pub fn atan(self) -> Self {
        let scale = 1.0 / (1.0 + self.v * self.v);
        Dual4 {
            v: self.v.atan(),
            d: self.d.map(|t| t * scale),
        }
    }

    pub fn scale(self, k: f64) -> Self {
        Dual4 {
            v: self.v * k,
            d: self.d.map(|t| t * k),
        }
    }
}

impl Add for Dual4 {
    type Output = Dual4;
    fn add(self, rhs: Self) -> Dual4 {
        Dual4 {
            v: self.v + rhs.v,
            d: [
                self.d[0] + rhs.d[0],
                self.d[1] + rhs.d[1],
                self.d[2] + rhs.d[2],
                self.d[3] + rhs.d[3],
            ],
        }
    }
}

impl Sub for Dual4 {
    type Output = Dual4;
    fn sub(self, rhs: Self) -> Dual4 {
        Dual4 {
            v: self.v - rhs.v,
            d: [
                self.d[0] - rhs.d[0],
                self.d[1] - rhs.d[1],
                self.d[2] - rhs.d[2],
                self.d[3] - rhs.d[3],
            ],
        }
    }
}

impl Mul for Dual4 {
    type Output = Dual4;
    fn mul(self, rhs: Self) -> Dual4 {
        Dual4 {
            v: self.v * rhs.v,
            d: [
                self.d[0] * rhs.v + self.v * rhs.d[0],
                self.d[1] * rhs.v + self.v * rhs.d[1],
                self.d[2] * rhs.v + self.v * rhs.d[2],
                self.d[3] * rhs.v + self.v * rhs.d[3],
            ],
        }
    }
}

impl Div for Dual4 {
    type Output = Dual4;
    fn div(self, rhs: Self) -> Dual4 {
        let inv = 1.0 / rhs.v;
        let v = self.v * inv;
        Dual4 {
            v,
            d: [
                (self.d[0] - v * rhs.d[0]) * inv,
                (self.d[1] - v * rhs.d[1]) * inv,
                (self.d[2] - v * rhs.d[2]) * inv,
                (self.d[3] - v * rhs.d[3]) * inv,
            ],
        }
    }
}

impl Neg for Dual4 {
    type Output = Dual4;
    fn neg(self) -> Dual4 {
        Dual4 {
            v: -self.v,
            d: self.d.map(|t| -t),
        }
    }
}
