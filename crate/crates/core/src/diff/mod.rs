//! Automatic differentiation.
//!
//! Two carriers share one scalar abstraction, [`Real`]:
//!
//! * [`Jet2`] propagates a value together with its first and second
//!   derivative along a single direction (truncated second-order Taylor
//!   arithmetic). Riemannian gradients and Laplace–Beltrami traces are built
//!   from sweeps of these along geodesics.
//! * [`Tape`] / [`Var`] record a scalar computation graph for reverse-mode
//!   parameter gradients.
//!
//! Because `Jet2<T>` is itself generic over `T: Real`, `Jet2<Var>` records
//! second-order directional information on the tape, which is how the
//! divergence term of the training loss gets differentiated.

mod jet;
mod tape;

pub use jet::{Jet2, JetOp};
pub use tape::{CustomBackward, Gradients, Tape, Var};

use std::fmt::Debug;
use std::ops::{Add, Div, Mul, Neg, Sub};

use thiserror::Error;

/// Stabilizing constant added inside square roots and moduli.
pub const EPS: f64 = 1e-12;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("{op} argument {arg} outside its domain")]
    Domain { op: &'static str, arg: f64 },
    #[error("{op} needs a second operand")]
    MissingOperand { op: &'static str },
}

/// Scalar type usable by every numeric kernel in the crate.
///
/// Branching decisions (sorting, clamping, scaling counts) are taken on
/// [`Real::value`], so a kernel written against this trait computes the same
/// primal numbers for `f64`, `Jet2<f64>`, `Var` and `Jet2<Var>`.
pub trait Real:
    Copy
    + Debug
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + Add<f64, Output = Self>
    + Sub<f64, Output = Self>
    + Mul<f64, Output = Self>
    + Div<f64, Output = Self>
{
    /// Lift a constant.
    fn cst(x: f64) -> Self;
    /// Primal value.
    fn value(&self) -> f64;

    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn tanh(self) -> Self;
    fn sqrt(self) -> Self;
    fn ln(self) -> Self;
    fn exp(self) -> Self;
    /// Four-quadrant arctangent of `self / x`.
    fn atan2(self, x: Self) -> Self;

    /// `Σ c·x`.
    fn lin_comb(terms: &[(f64, Self)]) -> Self {
        let mut acc = Self::cst(0.0);
        for &(c, x) in terms {
            acc = acc + x * c;
        }
        acc
    }

    /// `Σ c·x·y`.
    fn sum_prod(terms: &[(f64, Self, Self)]) -> Self {
        let mut acc = Self::cst(0.0);
        for &(c, x, y) in terms {
            acc = acc + x * y * c;
        }
        acc
    }

    fn zero() -> Self {
        Self::cst(0.0)
    }

    fn one() -> Self {
        Self::cst(1.0)
    }

    fn recip(self) -> Self {
        Self::cst(1.0) / self
    }

    fn square(self) -> Self {
        self * self
    }

    fn is_finite(&self) -> bool;
}

impl Real for f64 {
    #[inline]
    fn cst(x: f64) -> Self {
        x
    }
    #[inline]
    fn value(&self) -> f64 {
        *self
    }
    #[inline]
    fn sin(self) -> Self {
        f64::sin(self)
    }
    #[inline]
    fn cos(self) -> Self {
        f64::cos(self)
    }
    #[inline]
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
    #[inline]
    fn sqrt(self) -> Self {
        f64::sqrt(self)
    }
    #[inline]
    fn ln(self) -> Self {
        f64::ln(self)
    }
    #[inline]
    fn exp(self) -> Self {
        f64::exp(self)
    }
    #[inline]
    fn atan2(self, x: Self) -> Self {
        f64::atan2(self, x)
    }
    #[inline]
    fn is_finite(&self) -> bool {
        f64::is_finite(*self)
    }
}

/// Values of a slice of scalars.
pub fn values<S: Real>(xs: &[S]) -> Vec<f64> {
    xs.iter().map(Real::value).collect()
}
