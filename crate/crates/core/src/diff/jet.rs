use std::ops::{Add, Div, Mul, Neg, Sub};

use smallvec::SmallVec;

use super::{DiffError, Real, EPS};

/// Value, first and second derivative along one direction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Jet2<T> {
    pub v: T,
    pub d1: T,
    pub d2: T,
}

impl<T: Real> Jet2<T> {
    pub fn new(v: T, d1: T, d2: T) -> Self {
        Self { v, d1, d2 }
    }

    /// Seed a variable moving at unit speed: `{x, 1, 0}`.
    pub fn variable(x: T) -> Self {
        Self { v: x, d1: T::one(), d2: T::zero() }
    }

    pub fn constant(x: T) -> Self {
        Self { v: x, d1: T::zero(), d2: T::zero() }
    }

    /// Compose with a scalar function given its value and first two
    /// derivatives at `self.v`.
    #[inline]
    pub fn chain(self, f: T, f1: T, f2: T) -> Self {
        Self {
            v: f,
            d1: f1 * self.d1,
            d2: f2 * self.d1 * self.d1 + f1 * self.d2,
        }
    }
}

impl Jet2<f64> {
    /// Checked primitive application.
    ///
    /// `sqrt` and `log` receive the stabilizing `EPS` on their argument;
    /// a negative argument, or a zero divisor, is rejected.
    pub fn apply(self, op: JetOp, other: Option<Jet2<f64>>) -> Result<Jet2<f64>, DiffError> {
        let rhs = |name| other.ok_or(DiffError::MissingOperand { op: name });
        Ok(match op {
            JetOp::Add => self + rhs("add")?,
            JetOp::Mul => self * rhs("mul")?,
            JetOp::Div => {
                let b = rhs("div")?;
                if b.v == 0.0 || !b.v.is_finite() {
                    return Err(DiffError::Domain { op: "div", arg: b.v });
                }
                self / b
            }
            JetOp::Tanh => self.tanh(),
            JetOp::Sin => self.sin(),
            JetOp::Cos => self.cos(),
            JetOp::Exp => self.exp(),
            JetOp::Sqrt => {
                if self.v < 0.0 || self.v.is_nan() {
                    return Err(DiffError::Domain { op: "sqrt", arg: self.v });
                }
                (self + EPS).sqrt()
            }
            JetOp::Log => {
                if self.v < 0.0 || self.v.is_nan() {
                    return Err(DiffError::Domain { op: "log", arg: self.v });
                }
                (self + EPS).ln()
            }
        })
    }
}

/// Primitive operations exposed through [`Jet2::apply`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JetOp {
    Add,
    Mul,
    Tanh,
    Sin,
    Cos,
    Sqrt,
    Log,
    Exp,
    Div,
}

impl<T: Real> Add for Jet2<T> {
    type Output = Self;
    #[inline]
    fn add(self, b: Self) -> Self {
        Self { v: self.v + b.v, d1: self.d1 + b.d1, d2: self.d2 + b.d2 }
    }
}

impl<T: Real> Sub for Jet2<T> {
    type Output = Self;
    #[inline]
    fn sub(self, b: Self) -> Self {
        Self { v: self.v - b.v, d1: self.d1 - b.d1, d2: self.d2 - b.d2 }
    }
}

impl<T: Real> Mul for Jet2<T> {
    type Output = Self;
    #[inline]
    fn mul(self, b: Self) -> Self {
        Self {
            v: self.v * b.v,
            d1: T::sum_prod(&[(1.0, self.v, b.d1), (1.0, self.d1, b.v)]),
            d2: T::sum_prod(&[(1.0, self.v, b.d2), (2.0, self.d1, b.d1), (1.0, self.d2, b.v)]),
        }
    }
}

impl<T: Real> Div for Jet2<T> {
    type Output = Self;
    #[inline]
    fn div(self, b: Self) -> Self {
        // a = q·b differentiated twice, solved for q', q''
        let r = b.v.recip();
        let q = self.v / b.v;
        let d1 = T::sum_prod(&[(1.0, self.d1, r), (-1.0, q * b.d1, r)]);
        let d2 = (self.d2 - T::sum_prod(&[(2.0, d1, b.d1), (1.0, q, b.d2)])) * r;
        Self { v: q, d1, d2 }
    }
}

impl<T: Real> Neg for Jet2<T> {
    type Output = Self;
    #[inline]
    fn neg(self) -> Self {
        Self { v: -self.v, d1: -self.d1, d2: -self.d2 }
    }
}

impl<T: Real> Add<f64> for Jet2<T> {
    type Output = Self;
    #[inline]
    fn add(self, b: f64) -> Self {
        Self { v: self.v + b, ..self }
    }
}

impl<T: Real> Sub<f64> for Jet2<T> {
    type Output = Self;
    #[inline]
    fn sub(self, b: f64) -> Self {
        Self { v: self.v - b, ..self }
    }
}

impl<T: Real> Mul<f64> for Jet2<T> {
    type Output = Self;
    #[inline]
    fn mul(self, b: f64) -> Self {
        Self { v: self.v * b, d1: self.d1 * b, d2: self.d2 * b }
    }
}

impl<T: Real> Div<f64> for Jet2<T> {
    type Output = Self;
    #[inline]
    fn div(self, b: f64) -> Self {
        self * (1.0 / b)
    }
}

impl<T: Real> Real for Jet2<T> {
    fn cst(x: f64) -> Self {
        Self::constant(T::cst(x))
    }

    fn value(&self) -> f64 {
        self.v.value()
    }

    fn sin(self) -> Self {
        let s = self.v.sin();
        let c = self.v.cos();
        self.chain(s, c, -s)
    }

    fn cos(self) -> Self {
        let s = self.v.sin();
        let c = self.v.cos();
        self.chain(c, -s, -c)
    }

    fn tanh(self) -> Self {
        let y = self.v.tanh();
        let s = T::one() - y * y;
        self.chain(y, s, -(y * s) * 2.0)
    }

    fn sqrt(self) -> Self {
        let r = self.v.sqrt();
        let f1 = r.recip() * 0.5;
        let f2 = -(f1 / self.v) * 0.5;
        self.chain(r, f1, f2)
    }

    fn ln(self) -> Self {
        let r = self.v.recip();
        self.chain(self.v.ln(), r, -(r * r))
    }

    fn exp(self) -> Self {
        let e = self.v.exp();
        self.chain(e, e, e)
    }

    fn atan2(self, x: Self) -> Self {
        // θ' = (x y' − y x') / r², θ'' = (n' r² − n (r²)') / r⁴
        let y = self;
        let r2 = T::sum_prod(&[(1.0, x.v, x.v), (1.0, y.v, y.v)]);
        let num = T::sum_prod(&[(1.0, x.v, y.d1), (-1.0, y.v, x.d1)]);
        let num1 = T::sum_prod(&[(1.0, x.v, y.d2), (-1.0, y.v, x.d2)]);
        let r2d = T::sum_prod(&[(2.0, x.v, x.d1), (2.0, y.v, y.d1)]);
        let inv = r2.recip();
        let d1 = num * inv;
        let d2 = (num1 - d1 * r2d) * inv;
        Self { v: y.v.atan2(x.v), d1, d2 }
    }

    fn lin_comb(terms: &[(f64, Self)]) -> Self {
        let mut a: SmallVec<[(f64, T); 16]> = SmallVec::new();
        let mut b: SmallVec<[(f64, T); 16]> = SmallVec::new();
        let mut c: SmallVec<[(f64, T); 16]> = SmallVec::new();
        for &(k, x) in terms {
            a.push((k, x.v));
            b.push((k, x.d1));
            c.push((k, x.d2));
        }
        Self { v: T::lin_comb(&a), d1: T::lin_comb(&b), d2: T::lin_comb(&c) }
    }

    fn sum_prod(terms: &[(f64, Self, Self)]) -> Self {
        let mut a: SmallVec<[(f64, T, T); 16]> = SmallVec::new();
        let mut b: SmallVec<[(f64, T, T); 32]> = SmallVec::new();
        let mut c: SmallVec<[(f64, T, T); 48]> = SmallVec::new();
        for &(k, x, y) in terms {
            a.push((k, x.v, y.v));
            b.push((k, x.v, y.d1));
            b.push((k, x.d1, y.v));
            c.push((k, x.v, y.d2));
            c.push((2.0 * k, x.d1, y.d1));
            c.push((k, x.d2, y.v));
        }
        Self { v: T::sum_prod(&a), d1: T::sum_prod(&b), d2: T::sum_prod(&c) }
    }

    fn is_finite(&self) -> bool {
        self.v.is_finite() && self.d1.is_finite() && self.d2.is_finite()
    }
}
