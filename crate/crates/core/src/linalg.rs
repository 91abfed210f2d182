//! Dense complex arithmetic for 2×2 and 3×3 matrices.
//!
//! Everything except [`qr_factor`] is generic over [`Real`], so the same
//! kernels run on plain floats, jets and taped variables.

use std::ops::{Add, Mul, Neg, Sub};

use smallvec::SmallVec;
use thiserror::Error;

use crate::diff::{Real, EPS};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LinalgError {
    #[error("dimension mismatch: {0}x{0} vs {1}x{1}")]
    DimensionMismatch(usize, usize),
    #[error("unsupported dimension {0} (expected 2 or 3)")]
    UnsupportedDimension(usize),
    #[error("rank-deficient input: |r[{index}][{index}]| = {value:e}")]
    RankDeficient { index: usize, value: f64 },
    #[error("input is not traceless skew-Hermitian (deviation {0:e})")]
    NotSkewHermitian(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Complex<T> {
    pub re: T,
    pub im: T,
}

impl<T: Real> Complex<T> {
    pub fn new(re: T, im: T) -> Self {
        Self { re, im }
    }

    pub fn cst(re: f64, im: f64) -> Self {
        Self { re: T::cst(re), im: T::cst(im) }
    }

    pub fn zero() -> Self {
        Self::cst(0.0, 0.0)
    }

    pub fn one() -> Self {
        Self::cst(1.0, 0.0)
    }

    pub fn from_real(re: T) -> Self {
        Self { re, im: T::zero() }
    }

    /// `e^{iθ}`.
    pub fn cis(theta: T) -> Self {
        Self { re: theta.cos(), im: theta.sin() }
    }

    pub fn lift(z: Complex<f64>) -> Self {
        Self::cst(z.re, z.im)
    }

    pub fn value(&self) -> Complex<f64> {
        Complex { re: self.re.value(), im: self.im.value() }
    }

    pub fn conj(self) -> Self {
        Self { re: self.re, im: -self.im }
    }

    pub fn scale(self, k: f64) -> Self {
        Self { re: self.re * k, im: self.im * k }
    }

    pub fn scale_by(self, k: T) -> Self {
        Self { re: self.re * k, im: self.im * k }
    }

    /// Product with a constant.
    pub fn mul_c(self, c: Complex<f64>) -> Self {
        Self {
            re: T::lin_comb(&[(c.re, self.re), (-c.im, self.im)]),
            im: T::lin_comb(&[(c.im, self.re), (c.re, self.im)]),
        }
    }

    pub fn norm_sqr(self) -> T {
        T::sum_prod(&[(1.0, self.re, self.re), (1.0, self.im, self.im)])
    }

    /// Modulus with the stabilizing constant inside the root.
    pub fn abs_eps(self) -> T {
        (self.norm_sqr() + EPS).sqrt()
    }

    pub fn arg(self) -> T {
        self.im.atan2(self.re)
    }

    pub fn recip(self) -> Self {
        let d = self.norm_sqr().recip();
        Self { re: self.re * d, im: -(self.im * d) }
    }

    pub fn div(self, b: Self) -> Self {
        self * b.recip()
    }

    /// Principal power `z^{1/k}` through polar form.
    fn root(self, k: f64) -> Self {
        let r = (self.norm_sqr().ln() * (0.5 / k)).exp();
        let phi = self.arg() * (1.0 / k);
        Self { re: r * phi.cos(), im: r * phi.sin() }
    }

    pub fn sqrt(self) -> Self {
        self.root(2.0)
    }

    pub fn cbrt(self) -> Self {
        self.root(3.0)
    }
}

impl Complex<f64> {
    pub fn abs(self) -> f64 {
        self.re.hypot(self.im)
    }
}

impl<T: Real> Add for Complex<T> {
    type Output = Self;
    fn add(self, b: Self) -> Self {
        Self { re: self.re + b.re, im: self.im + b.im }
    }
}

impl<T: Real> Sub for Complex<T> {
    type Output = Self;
    fn sub(self, b: Self) -> Self {
        Self { re: self.re - b.re, im: self.im - b.im }
    }
}

impl<T: Real> Mul for Complex<T> {
    type Output = Self;
    fn mul(self, b: Self) -> Self {
        Self {
            re: T::sum_prod(&[(1.0, self.re, b.re), (-1.0, self.im, b.im)]),
            im: T::sum_prod(&[(1.0, self.re, b.im), (1.0, self.im, b.re)]),
        }
    }
}

impl<T: Real> Neg for Complex<T> {
    type Output = Self;
    fn neg(self) -> Self {
        Self { re: -self.re, im: -self.im }
    }
}

/// Σ aᵢ·bᵢ as a single fused product per component.
pub fn cdot<T: Real>(a: &[Complex<T>], b: &[Complex<T>]) -> Complex<T> {
    let mut re: SmallVec<[(f64, T, T); 8]> = SmallVec::new();
    let mut im: SmallVec<[(f64, T, T); 8]> = SmallVec::new();
    for (x, y) in a.iter().zip(b) {
        re.push((1.0, x.re, y.re));
        re.push((-1.0, x.im, y.im));
        im.push((1.0, x.re, y.im));
        im.push((1.0, x.im, y.re));
    }
    Complex { re: T::sum_prod(&re), im: T::sum_prod(&im) }
}

/// Square complex matrix of dimension 2 or 3, row-major.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CMatrix<T> {
    n: usize,
    e: [Complex<T>; 9],
}

impl<T: Real> CMatrix<T> {
    pub fn zeros(n: usize) -> Self {
        assert!(n == 2 || n == 3, "CMatrix supports n in {{2, 3}}, got {n}");
        Self { n, e: [Complex::zero(); 9] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m[(i, i)] = Complex::one();
        }
        m
    }

    pub fn from_fn(n: usize, mut f: impl FnMut(usize, usize) -> Complex<T>) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m[(i, j)] = f(i, j);
            }
        }
        m
    }

    pub fn diag(d: &[Complex<T>]) -> Self {
        let mut m = Self::zeros(d.len());
        for (i, &z) in d.iter().enumerate() {
            m[(i, i)] = z;
        }
        m
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn lift(m: &CMatrix<f64>) -> Self {
        CMatrix::from_fn(m.n, |i, j| Complex::lift(m[(i, j)]))
    }

    pub fn value(&self) -> CMatrix<f64> {
        CMatrix::from_fn(self.n, |i, j| self[(i, j)].value())
    }

    pub fn map<U: Real>(&self, mut f: impl FnMut(Complex<T>) -> Complex<U>) -> CMatrix<U> {
        CMatrix::from_fn(self.n, |i, j| f(self[(i, j)]))
    }

    pub fn row(&self, i: usize) -> &[Complex<T>] {
        &self.e[i * self.n..(i + 1) * self.n]
    }

    pub fn col(&self, j: usize) -> SmallVec<[Complex<T>; 3]> {
        (0..self.n).map(|i| self[(i, j)]).collect()
    }

    /// Matrix product; dimensions must agree.
    pub fn dot(&self, b: &Self) -> Self {
        debug_assert_eq!(self.n, b.n);
        let n = self.n;
        let mut out = Self::zeros(n);
        for j in 0..n {
            let col = b.col(j);
            for i in 0..n {
                out[(i, j)] = cdot(self.row(i), &col);
            }
        }
        out
    }

    /// Product with a constant matrix on the right.
    pub fn dot_const(&self, c: &CMatrix<f64>) -> Self {
        debug_assert_eq!(self.n, c.n);
        let n = self.n;
        let mut out = Self::zeros(n);
        let mut re: SmallVec<[(f64, T); 6]> = SmallVec::new();
        let mut im: SmallVec<[(f64, T); 6]> = SmallVec::new();
        for i in 0..n {
            for j in 0..n {
                re.clear();
                im.clear();
                for k in 0..n {
                    let a = self[(i, k)];
                    let b = c[(k, j)];
                    re.push((b.re, a.re));
                    re.push((-b.im, a.im));
                    im.push((b.im, a.re));
                    im.push((b.re, a.im));
                }
                out[(i, j)] = Complex { re: T::lin_comb(&re), im: T::lin_comb(&im) };
            }
        }
        out
    }

    /// Product with a constant matrix on the left.
    pub fn const_dot(c: &CMatrix<f64>, b: &Self) -> Self {
        b.adjoint().dot_const(&c.adjoint()).adjoint()
    }

    pub fn adjoint(&self) -> Self {
        CMatrix::from_fn(self.n, |i, j| self[(j, i)].conj())
    }

    pub fn trace(&self) -> Complex<T> {
        let mut re: SmallVec<[(f64, T); 3]> = SmallVec::new();
        let mut im: SmallVec<[(f64, T); 3]> = SmallVec::new();
        for i in 0..self.n {
            re.push((1.0, self[(i, i)].re));
            im.push((1.0, self[(i, i)].im));
        }
        Complex { re: T::lin_comb(&re), im: T::lin_comb(&im) }
    }

    /// `tr(self · c)` for a constant `c`, without forming the product.
    pub fn trace_dot_const(&self, c: &CMatrix<f64>) -> Complex<T> {
        let mut re: SmallVec<[(f64, T); 18]> = SmallVec::new();
        let mut im: SmallVec<[(f64, T); 18]> = SmallVec::new();
        for i in 0..self.n {
            for k in 0..self.n {
                let a = self[(i, k)];
                let b = c[(k, i)];
                re.push((b.re, a.re));
                re.push((-b.im, a.im));
                im.push((b.im, a.re));
                im.push((b.re, a.im));
            }
        }
        Complex { re: T::lin_comb(&re), im: T::lin_comb(&im) }
    }

    pub fn scale(&self, k: f64) -> Self {
        self.map(|z| z.scale(k))
    }

    pub fn scale_by(&self, k: T) -> Self {
        self.map(|z| z.scale_by(k))
    }

    pub fn add(&self, b: &Self) -> Self {
        CMatrix::from_fn(self.n, |i, j| self[(i, j)] + b[(i, j)])
    }

    pub fn sub(&self, b: &Self) -> Self {
        CMatrix::from_fn(self.n, |i, j| self[(i, j)] - b[(i, j)])
    }

    /// `[a, b] = ab − ba`.
    pub fn commutator(&self, b: &Self) -> Self {
        self.dot(b).sub(&b.dot(self))
    }

    /// Σ cₖ·Mₖ over constant matrices with scalar coefficients.
    pub fn combine(n: usize, coeffs: &[T], mats: &[CMatrix<f64>]) -> Self {
        let mut out = Self::zeros(n);
        let mut re: SmallVec<[(f64, T); 8]> = SmallVec::new();
        let mut im: SmallVec<[(f64, T); 8]> = SmallVec::new();
        for i in 0..n {
            for j in 0..n {
                re.clear();
                im.clear();
                for (c, m) in coeffs.iter().zip(mats) {
                    let z = m[(i, j)];
                    if z.re != 0.0 {
                        re.push((z.re, *c));
                    }
                    if z.im != 0.0 {
                        im.push((z.im, *c));
                    }
                }
                out[(i, j)] = Complex { re: T::lin_comb(&re), im: T::lin_comb(&im) };
            }
        }
        out
    }

    /// Cofactor-expansion determinant.
    pub fn det(&self) -> Complex<T> {
        let m = |i, j| self[(i, j)];
        match self.n {
            2 => m(0, 0) * m(1, 1) - m(0, 1) * m(1, 0),
            _ => {
                m(0, 0) * (m(1, 1) * m(2, 2) - m(1, 2) * m(2, 1))
                    - m(0, 1) * (m(1, 0) * m(2, 2) - m(1, 2) * m(2, 0))
                    + m(0, 2) * (m(1, 0) * m(2, 1) - m(1, 1) * m(2, 0))
            }
        }
    }

    /// Frobenius norm of the primal values.
    pub fn norm_fro(&self) -> f64 {
        self.e[..self.n * self.n]
            .iter()
            .map(|z| z.value().re.powi(2) + z.value().im.powi(2))
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.e[..self.n * self.n].iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }
}

impl<T> std::ops::Index<(usize, usize)> for CMatrix<T> {
    type Output = Complex<T>;
    fn index(&self, (i, j): (usize, usize)) -> &Complex<T> {
        &self.e[i * self.n + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for CMatrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut Complex<T> {
        &mut self.e[i * self.n + j]
    }
}

/// `Re tr(aᴴ b)`, the real Frobenius inner product.
pub fn re_inner<T: Real>(a: &CMatrix<T>, b: &CMatrix<T>) -> T {
    let n = a.n();
    let mut terms: SmallVec<[(f64, T, T); 18]> = SmallVec::new();
    for i in 0..n {
        for j in 0..n {
            terms.push((1.0, a[(i, j)].re, b[(i, j)].re));
            terms.push((1.0, a[(i, j)].im, b[(i, j)].im));
        }
    }
    T::sum_prod(&terms)
}

pub fn matmul(a: &CMatrix<f64>, b: &CMatrix<f64>) -> Result<CMatrix<f64>, LinalgError> {
    if a.n() != b.n() {
        return Err(LinalgError::DimensionMismatch(a.n(), b.n()));
    }
    Ok(a.dot(b))
}

pub fn adjoint(a: &CMatrix<f64>) -> CMatrix<f64> {
    a.adjoint()
}

pub fn det(a: &CMatrix<f64>) -> Complex<f64> {
    a.det()
}

/// Modified Gram–Schmidt QR: `a = q·r` with `q` unitary and `r` upper
/// triangular with real positive diagonal.
pub fn qr_factor(a: &CMatrix<f64>) -> Result<(CMatrix<f64>, CMatrix<f64>), LinalgError> {
    let n = a.n();
    let mut cols: Vec<Vec<Complex<f64>>> = (0..n).map(|j| a.col(j).to_vec()).collect();
    let mut r = CMatrix::<f64>::zeros(n);
    for j in 0..n {
        for i in 0..j {
            // r_ij = ⟨q_i, v_j⟩ = Σ conj(q_i)·v_j, using the updated column (MGS).
            let mut s = Complex::zero();
            for k in 0..n {
                s = s + cols[i][k].conj() * cols[j][k];
            }
            r[(i, j)] = s;
            for k in 0..n {
                let qik = cols[i][k];
                cols[j][k] = cols[j][k] - qik * s;
            }
        }
        let norm = cols[j].iter().map(|z| z.re * z.re + z.im * z.im).sum::<f64>().sqrt();
        if norm < 1e-14 {
            return Err(LinalgError::RankDeficient { index: j, value: norm });
        }
        r[(j, j)] = Complex::cst(norm, 0.0);
        for z in cols[j].iter_mut() {
            *z = z.scale(1.0 / norm);
        }
    }
    let q = CMatrix::from_fn(n, |i, j| cols[j][i]);
    Ok((q, r))
}

const TAYLOR_ORDER: u32 = 12;

/// Matrix exponential by scaling and squaring with a fixed order-12 Taylor
/// polynomial. No structural check on the input.
pub fn expm<T: Real>(a: &CMatrix<T>) -> CMatrix<T> {
    let n = a.n();
    let norm = a.norm_fro();
    let mut squarings = 0;
    let mut scaled = norm;
    while scaled > 0.5 {
        scaled *= 0.5;
        squarings += 1;
    }
    let x = a.scale(0.5f64.powi(squarings));
    let id = CMatrix::<T>::identity(n);
    // Horner: I + X(I + X/2(I + … (I + X/12)))
    let mut p = id.add(&x.scale(1.0 / TAYLOR_ORDER as f64));
    for k in (1..TAYLOR_ORDER).rev() {
        p = id.add(&x.dot(&p).scale(1.0 / k as f64));
    }
    for _ in 0..squarings {
        p = p.dot(&p);
    }
    p
}

/// Closed-form exponential of a traceless skew-Hermitian 2×2 matrix:
/// `cos θ I + (sin θ/θ) A` with `θ² = Im(a₀₀)² + |a₀₁|²`.
pub fn su2_exp<T: Real>(a: &CMatrix<T>) -> CMatrix<T> {
    assert_eq!(a.n(), 2, "su2_exp needs a 2x2 matrix");
    let t2 = T::sum_prod(&[(1.0, a[(0, 0)].im, a[(0, 0)].im), (1.0, a[(0, 1)].re, a[(0, 1)].re), (1.0, a[(0, 1)].im, a[(0, 1)].im)]);
    let (c, s) = if t2.value() < 1e-6 {
        let c = ((t2 * (-1.0 / 720.0) + 1.0 / 24.0) * t2 - 0.5) * t2 + 1.0;
        let s = ((t2 * (-1.0 / 5040.0) + 1.0 / 120.0) * t2 - 1.0 / 6.0) * t2 + 1.0;
        (c, s)
    } else {
        let t = t2.sqrt();
        (t.cos(), t.sin() / t)
    };
    CMatrix::from_fn(2, |i, j| {
        let z = a[(i, j)].scale_by(s);
        if i == j {
            Complex { re: z.re + c, im: z.im }
        } else {
            z
        }
    })
}

/// Deviation of `a` from the traceless skew-Hermitian subspace.
pub fn skew_deviation(a: &CMatrix<f64>) -> f64 {
    a.add(&a.adjoint()).norm_fro() + a.trace().abs()
}

/// Exponential of a traceless skew-Hermitian matrix, landing in SU(n).
pub fn skew_exp(a: &CMatrix<f64>) -> Result<CMatrix<f64>, LinalgError> {
    let dev = skew_deviation(a);
    if dev > 1e-10 {
        return Err(LinalgError::NotSkewHermitian(dev));
    }
    Ok(expm(a))
}
