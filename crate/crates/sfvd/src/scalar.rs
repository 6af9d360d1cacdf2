//! Generic scalar abstraction for the hand-written compute kernels.
//!
//! All forward/backward kernels in this crate are written once over [`Real`]
//! and run either on plain `f64` or on [`Dual`] numbers. Running a full
//! forward+backward pass on duals yields exact Jacobian-vector products of
//! the gradient computation itself, which is how the distillation engine
//! obtains Hessian-vector products without a second-order tape.

use std::fmt::Debug;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + 'static
{
    fn from_f64(x: f64) -> Self;
    /// Value part (drops any tangent).
    fn value(self) -> f64;
    fn zero() -> Self {
        Self::from_f64(0.0)
    }
    fn one() -> Self {
        Self::from_f64(1.0)
    }
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn tanh(self) -> Self;
    /// Branch on value parts; tangents follow the selected branch.
    fn max_by_value(self, other: Self) -> Self {
        if self.value() >= other.value() {
            self
        } else {
            other
        }
    }
    fn relu(self) -> Self {
        if self.value() > 0.0 {
            self
        } else {
            Self::zero()
        }
    }
    fn sigmoid(self) -> Self {
        Self::one() / (Self::one() + (-self).exp())
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(self) -> f64 {
        self
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

/// Forward-mode dual number: value `v` plus tangent `t`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Dual {
    pub v: f64,
    pub t: f64,
}

impl Dual {
    #[inline]
    pub fn new(v: f64, t: f64) -> Self {
        Dual { v, t }
    }
    #[inline]
    pub fn constant(v: f64) -> Self {
        Dual { v, t: 0.0 }
    }
}

impl Add for Dual {
    type Output = Dual;
    #[inline]
    fn add(self, r: Dual) -> Dual {
        Dual::new(self.v + r.v, self.t + r.t)
    }
}

impl Sub for Dual {
    type Output = Dual;
    #[inline]
    fn sub(self, r: Dual) -> Dual {
        Dual::new(self.v - r.v, self.t - r.t)
    }
}

impl Mul for Dual {
    type Output = Dual;
    #[inline]
    fn mul(self, r: Dual) -> Dual {
        Dual::new(self.v * r.v, self.v * r.t + self.t * r.v)
    }
}

impl Div for Dual {
    type Output = Dual;
    #[inline]
    fn div(self, r: Dual) -> Dual {
        let inv = 1.0 / r.v;
        Dual::new(self.v * inv, (self.t - self.v * inv * r.t) * inv)
    }
}

impl Neg for Dual {
    type Output = Dual;
    #[inline]
    fn neg(self) -> Dual {
        Dual::new(-self.v, -self.t)
    }
}

impl AddAssign for Dual {
    #[inline]
    fn add_assign(&mut self, r: Dual) {
        self.v += r.v;
        self.t += r.t;
    }
}

impl SubAssign for Dual {
    #[inline]
    fn sub_assign(&mut self, r: Dual) {
        self.v -= r.v;
        self.t -= r.t;
    }
}

impl Real for Dual {
    #[inline]
    fn from_f64(x: f64) -> Self {
        Dual::constant(x)
    }
    #[inline]
    fn value(self) -> f64 {
        self.v
    }
    #[inline]
    fn exp(self) -> Self {
        let e = self.v.exp();
        Dual::new(e, e * self.t)
    }
    #[inline]
    fn ln(self) -> Self {
        Dual::new(self.v.ln(), self.t / self.v)
    }
    #[inline]
    fn sqrt(self) -> Self {
        let s = self.v.sqrt();
        Dual::new(s, 0.5 * self.t / s)
    }
    #[inline]
    fn tanh(self) -> Self {
        let th = self.v.tanh();
        Dual::new(th, (1.0 - th * th) * self.t)
    }
}

/// Lift an `f64` slice into any `Real` type with zero tangents.
pub fn lift<S: Real>(xs: &[f64]) -> Vec<S> {
    xs.iter().map(|&x| S::from_f64(x)).collect()
}

/// Extract value parts of a generic slice.
pub fn values<S: Real>(xs: &[S]) -> Vec<f64> {
    xs.iter().map(|x| x.value()).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(v: f64, t: f64) -> Dual {
        Dual::new(v, t)
    }

    #[test]
    fn dual_arithmetic_matches_derivatives() {
        // d/dx (x*x) at x=3 is 6
        let x = d(3.0, 1.0);
        assert_eq!((x * x).t, 6.0);
        // d/dx (1/x) at x=2 is -0.25
        let y = Dual::constant(1.0) / d(2.0, 1.0);
        assert!((y.t + 0.25).abs() < 1e-15);
        // chain through exp/ln/sqrt/tanh against central differences
        let f = |x: f64| ((x.exp() + 1.0).ln() * x).sqrt().tanh();
        let x0 = 0.7;
        let eps = 1e-6;
        let fd = (f(x0 + eps) - f(x0 - eps)) / (2.0 * eps);
        let xd = d(x0, 1.0);
        let yd = ((xd.exp() + Dual::constant(1.0)).ln() * xd).sqrt().tanh();
        assert!((yd.t - fd).abs() < 1e-8, "dual {} vs fd {}", yd.t, fd);
    }

    #[test]
    fn relu_and_max_follow_value_branch() {
        assert_eq!(d(-1.0, 5.0).relu(), Dual::constant(0.0));
        assert_eq!(d(2.0, 5.0).relu(), d(2.0, 5.0));
        assert_eq!(d(1.0, 1.0).max_by_value(d(2.0, 7.0)), d(2.0, 7.0));
    }
}
