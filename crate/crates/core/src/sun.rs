//! The special unitary groups SU(2) and SU(3).
//!
//! Eigen-angles come from closed forms: the trace for SU(2) and Cardano's
//! formula on the characteristic polynomial for SU(3). [`angle_jets`] adds
//! first and second derivatives of the angles along a set of left-invariant
//! directions, which is what gradient and Laplacian evaluation of class
//! functions consume.

use std::f64::consts::PI;
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::StandardNormal;
use smallvec::SmallVec;
use thiserror::Error;

use crate::diff::{Jet2, Real, EPS};
use crate::linalg::{qr_factor, skew_exp, CMatrix, Complex, LinalgError};

/// Unitarity and determinant tolerance of [`SpecialUnitary`].
pub const UNITARY_TOL: f64 = 1e-9;
/// Characteristic-polynomial residual above which Cardano roots are rejected.
pub const RESIDUAL_TOL: f64 = 1e-7;
/// Smallest accepted quadrature resolution.
pub const MIN_RESOLUTION: usize = 16;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SunError {
    #[error("unsupported dimension {0} (expected 2 or 3)")]
    UnsupportedDimension(usize),
    #[error("matrix is not special unitary (unitarity {unitarity:e}, determinant {det:e})")]
    NotSpecialUnitary { unitarity: f64, det: f64 },
    #[error("closed-form eigenvalues failed: residual {0:e}; use an iterative eigensolver")]
    EigenFallback(f64),
    #[error("quadrature resolution {0} below minimum {MIN_RESOLUTION}")]
    Resolution(usize),
    #[error("algebra vector has {got} coordinates, expected {expected}")]
    AlgebraLength { got: usize, expected: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// An element of SU(n), n ∈ {2, 3}.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SpecialUnitary {
    m: CMatrix<f64>,
}

/// `(‖mᴴm − I‖_F, |det m − 1|)`.
pub fn unitarity_defect(m: &CMatrix<f64>) -> (f64, f64) {
    let n = m.n();
    let u = m.adjoint().dot(m).sub(&CMatrix::identity(n)).norm_fro();
    let d = (m.det() - Complex::one()).abs();
    (u, d)
}

impl SpecialUnitary {
    /// Validate `m`; a drift above half the tolerance is projected back.
    pub fn new(m: CMatrix<f64>) -> Result<Self, SunError> {
        let (u, d) = unitarity_defect(&m);
        if u > UNITARY_TOL || d > UNITARY_TOL || !m.is_finite() {
            return Err(SunError::NotSpecialUnitary { unitarity: u, det: d });
        }
        if u > 0.5 * UNITARY_TOL || d > 0.5 * UNITARY_TOL {
            return Ok(Self { m: project(&m)? });
        }
        Ok(Self { m })
    }

    pub fn identity(n: usize) -> Self {
        Self { m: CMatrix::identity(n) }
    }

    pub fn matrix(&self) -> &CMatrix<f64> {
        &self.m
    }

    pub fn n(&self) -> usize {
        self.m.n()
    }

    pub fn inverse(&self) -> Self {
        Self { m: self.m.adjoint() }
    }

    pub fn mul(&self, b: &Self) -> Self {
        Self { m: self.m.dot(&b.m) }
    }
}

/// Nearest-ish special unitary matrix: QR orthonormalization followed by
/// the determinant phase fix.
fn project(m: &CMatrix<f64>) -> Result<CMatrix<f64>, SunError> {
    let (q, r) = qr_factor(m)?;
    let n = m.n();
    let phases: Vec<Complex<f64>> = (0..n).map(|j| r[(j, j)].scale(1.0 / r[(j, j)].abs())).collect();
    let q = q.dot(&CMatrix::diag(&phases));
    Ok(fix_det(&q))
}

fn fix_det(q: &CMatrix<f64>) -> CMatrix<f64> {
    let n = q.n();
    let phi = q.det().arg();
    q.map(|z| z * Complex::cis(-phi / n as f64))
}

/// Eigenvalue phases of an SU(n) element, sorted ascending in (−π, π].
#[derive(Debug, Clone, PartialEq)]
pub struct EigenAngles {
    thetas: SmallVec<[f64; 3]>,
}

impl EigenAngles {
    pub fn new(thetas: &[f64]) -> Self {
        let mut t: SmallVec<[f64; 3]> = thetas.iter().map(|&x| if x == -PI { PI } else { x }).collect();
        t.sort_by(f64::total_cmp);
        Self { thetas: t }
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.thetas
    }

    pub fn len(&self) -> usize {
        self.thetas.len()
    }

    pub fn is_empty(&self) -> bool {
        self.thetas.is_empty()
    }
}

struct Basis {
    mats: Vec<CMatrix<f64>>,
    squares: Vec<CMatrix<f64>>,
}

fn build_basis(n: usize) -> Basis {
    // i·λ/√2 for the generalized Gell-Mann matrices λ
    let s = std::f64::consts::FRAC_1_SQRT_2;
    let mut mats = Vec::new();
    for j in 0..n {
        for k in j + 1..n {
            let mut a = CMatrix::<f64>::zeros(n);
            a[(j, k)] = Complex::cst(0.0, s);
            a[(k, j)] = Complex::cst(0.0, s);
            mats.push(a);
            let mut b = CMatrix::<f64>::zeros(n);
            b[(j, k)] = Complex::cst(s, 0.0);
            b[(k, j)] = Complex::cst(-s, 0.0);
            mats.push(b);
        }
    }
    for l in 1..n {
        let norm = s * (2.0 / (l * (l + 1)) as f64).sqrt();
        let mut d = CMatrix::<f64>::zeros(n);
        for i in 0..l {
            d[(i, i)] = Complex::cst(0.0, norm);
        }
        d[(l, l)] = Complex::cst(0.0, -(l as f64) * norm);
        mats.push(d);
    }
    for (j, a) in mats.iter().enumerate() {
        for (k, b) in mats.iter().enumerate() {
            let g = crate::linalg::re_inner(a, b);
            let want = if j == k { 1.0 } else { 0.0 };
            assert!((g - want).abs() <= 1e-14, "su({n}) basis not orthonormal at ({j}, {k})");
        }
    }
    let squares = mats.iter().map(|a| a.dot(a)).collect();
    Basis { mats, squares }
}

fn basis_of(n: usize) -> &'static Basis {
    static SU2: OnceLock<Basis> = OnceLock::new();
    static SU3: OnceLock<Basis> = OnceLock::new();
    match n {
        2 => SU2.get_or_init(|| build_basis(2)),
        3 => SU3.get_or_init(|| build_basis(3)),
        _ => panic!("su(n) basis requested for n = {n}"),
    }
}

/// Orthonormal basis `{A_k}` of su(n) under `Re tr(AᴴB)`.
pub fn basis(n: usize) -> Result<&'static [CMatrix<f64>], SunError> {
    check_n(n)?;
    Ok(&basis_of(n).mats)
}

/// `A_k²` for every basis element.
pub fn basis_squares(n: usize) -> Result<&'static [CMatrix<f64>], SunError> {
    check_n(n)?;
    Ok(&basis_of(n).squares)
}

fn check_n(n: usize) -> Result<(), SunError> {
    if n == 2 || n == 3 {
        Ok(())
    } else {
        Err(SunError::UnsupportedDimension(n))
    }
}

/// `Σ w_k A_k`.
pub fn algebra_element(n: usize, w: &[f64]) -> Result<CMatrix<f64>, SunError> {
    let b = basis(n)?;
    if w.len() != b.len() {
        return Err(SunError::AlgebraLength { got: w.len(), expected: b.len() });
    }
    Ok(CMatrix::combine(n, w, b))
}

/// Coordinates of a traceless skew-Hermitian matrix in the basis.
pub fn algebra_coords(a: &CMatrix<f64>) -> Result<Vec<f64>, SunError> {
    Ok(basis(a.n())?.iter().map(|b| crate::linalg::re_inner(b, a)).collect())
}

/// Angle of the SU(2) eigenvalue pair as a function of `a = Re tr(u)/2`.
fn su2_angle<S: Real>(a: S) -> S {
    let r = S::one() - a * a;
    let r = if r.value() > 0.0 { r } else { S::zero() };
    (r + EPS).sqrt().atan2(a)
}

/// Closed-form SU(2) angles `(−θ, θ)` for any scalar carrier.
pub fn eig_su2_generic<S: Real>(u: &CMatrix<S>) -> [S; 2] {
    let theta = su2_angle(u.trace().re * 0.5);
    [-theta, theta]
}

/// Characteristic-polynomial coefficients `(c₂, c₁, c₀)` from the entries.
pub fn char_poly_su3<S: Real>(u: &CMatrix<S>) -> [Complex<S>; 3] {
    let m = |i, j| u[(i, j)];
    let c2 = -u.trace();
    let c1 = m(0, 0) * m(1, 1) + m(1, 1) * m(2, 2) + m(2, 2) * m(0, 0)
        - m(0, 1) * m(1, 0)
        - m(1, 2) * m(2, 1)
        - m(0, 2) * m(2, 0);
    let c0 = -u.det();
    [c2, c1, c0]
}

fn poly_eval<S: Real>(c: &[Complex<S>; 3], x: Complex<S>) -> Complex<S> {
    ((x + c[0]) * x + c[1]) * x + c[2]
}

/// Cardano roots of `λ³ + c₂λ² + c₁λ + c₀`, unsorted.
fn cardano<S: Real>(c: &[Complex<S>; 3]) -> [Complex<S>; 3] {
    let [c2, c1, c0] = *c;
    let c2sq = c2 * c2;
    let p = (c1.scale(3.0) - c2sq).scale(1.0 / 3.0);
    let q = (c2sq * c2).scale(2.0) - (c2 * c1).scale(9.0) + c0.scale(27.0);
    let q = q.scale(1.0 / 27.0);
    let shift = c2.scale(-1.0 / 3.0);
    let tiny = |z: Complex<S>| z.value().abs() <= 1e-12;
    if tiny(p) && tiny(q) {
        return [shift; 3];
    }
    let mut disc = q * q * Complex::cst(0.25, 0.0) + p * p * p * Complex::cst(1.0 / 27.0, 0.0);
    if disc.value().abs() < 1e-12 {
        disc = disc + Complex::cst(1e-12, 0.0);
    }
    let sd = disc.sqrt();
    let half_q = q.scale(-0.5);
    let (plus, minus) = (half_q + sd, half_q - sd);
    let u3 = if plus.value().abs() >= minus.value().abs() { plus } else { minus };
    let u = u3.cbrt();
    let v = (p * u.recip()).scale(-1.0 / 3.0);
    let w = Complex::<f64>::cis(2.0 * PI / 3.0);
    let w2 = w.conj();
    [
        u + v + shift,
        u.mul_c(w) + v.mul_c(w2) + shift,
        u.mul_c(w2) + v.mul_c(w) + shift,
    ]
}

fn sort_by_value<S: Real, const N: usize>(mut t: [S; N]) -> [S; N] {
    t.sort_by(|a, b| a.value().total_cmp(&b.value()));
    t
}

/// Closed-form SU(3) angles for any scalar carrier, sorted by value.
pub fn eig_su3_generic<S: Real>(u: &CMatrix<S>) -> Result<[S; 3], SunError> {
    let c = char_poly_su3(u);
    let roots = cardano(&c);
    let mut worst: f64 = 0.0;
    for r in &roots {
        worst = worst.max(poly_eval(&c, *r).value().abs());
    }
    if !(worst <= RESIDUAL_TOL) {
        return Err(SunError::EigenFallback(worst));
    }
    Ok(sort_by_value(roots.map(|r| r.arg())))
}

/// Angles of an SU(n) matrix held in any scalar carrier.
pub fn eig_generic<S: Real>(u: &CMatrix<S>) -> Result<SmallVec<[S; 3]>, SunError> {
    match u.n() {
        2 => Ok(SmallVec::from_slice(&eig_su2_generic(u))),
        3 => Ok(SmallVec::from_slice(&eig_su3_generic(u)?)),
        n => Err(SunError::UnsupportedDimension(n)),
    }
}

pub fn eig_su2(u: &SpecialUnitary) -> Result<EigenAngles, SunError> {
    if u.n() != 2 {
        return Err(SunError::UnsupportedDimension(u.n()));
    }
    Ok(EigenAngles::new(&eig_su2_generic(u.matrix())))
}

pub fn eig_su3(u: &SpecialUnitary) -> Result<EigenAngles, SunError> {
    if u.n() != 3 {
        return Err(SunError::UnsupportedDimension(u.n()));
    }
    Ok(EigenAngles::new(&eig_su3_generic(u.matrix())?))
}

pub fn eigen_angles(u: &SpecialUnitary) -> Result<EigenAngles, SunError> {
    Ok(EigenAngles::new(&eig_generic(u.matrix())?))
}

/// `max_i |det(λᵢ I − u)|` at `λᵢ = e^{iθᵢ}`.
pub fn char_poly_residual(u: &CMatrix<f64>, angles: &[f64]) -> f64 {
    let n = u.n();
    angles
        .iter()
        .map(|&t| {
            let l = Complex::<f64>::cis(t);
            CMatrix::<f64>::identity(n).map(|z| z * l).sub(u).det().abs()
        })
        .fold(0.0, f64::max)
}

/// Haar-distributed SU(n) element: QR of a complex Gaussian matrix, column
/// phase fix, then division by an n-th root of the determinant.
pub fn haar_sample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Result<SpecialUnitary, SunError> {
    check_n(n)?;
    let s = std::f64::consts::FRAC_1_SQRT_2;
    loop {
        let z = CMatrix::from_fn(n, |_, _| {
            let re: f64 = rng.sample(StandardNormal);
            let im: f64 = rng.sample(StandardNormal);
            Complex::cst(s * re, s * im)
        });
        let (q, r) = match qr_factor(&z) {
            Ok(qr) => qr,
            Err(LinalgError::RankDeficient { .. }) => continue,
            Err(e) => return Err(e.into()),
        };
        let phases: Vec<Complex<f64>> = (0..n).map(|j| r[(j, j)].scale(1.0 / r[(j, j)].abs())).collect();
        let q = q.dot(&CMatrix::diag(&phases));
        return Ok(SpecialUnitary { m: fix_det(&q) });
    }
}

/// `Σ_{i<j} log|e^{iθᵢ} − e^{iθⱼ}|²`; `−∞` for coincident angles.
pub fn haar_log_volume(angles: &[f64]) -> f64 {
    let mut acc = 0.0;
    for i in 0..angles.len() {
        for j in i + 1..angles.len() {
            let d = Complex::<f64>::cis(angles[i]) - Complex::cis(angles[j]);
            acc += d.norm_sqr().ln();
        }
    }
    acc
}

/// Left-translated frame `{u·A_k}`.
pub fn tangent_frame(u: &SpecialUnitary) -> Vec<CMatrix<f64>> {
    basis_of(u.n()).mats.iter().map(|a| u.matrix().dot(a)).collect()
}

/// `u · exp(h Σ w_k A_k)`.
pub fn geodesic_step(u: &SpecialUnitary, w: &[f64], h: f64) -> Result<SpecialUnitary, SunError> {
    let a = algebra_element(u.n(), w)?.scale(h);
    SpecialUnitary::new(u.matrix().dot(&skew_exp(&a)?))
}

/// `g u g⁻¹`.
pub fn conjugate(u: &SpecialUnitary, g: &SpecialUnitary) -> Result<SpecialUnitary, SunError> {
    if u.n() != g.n() {
        return Err(LinalgError::DimensionMismatch(u.n(), g.n()).into());
    }
    Ok(SpecialUnitary { m: g.matrix().dot(u.matrix()).dot(&g.matrix().adjoint()) })
}

/// Torus grid points with self-normalized Weyl weights `∏|λᵢ − λⱼ|²`.
///
/// For n = 2 the grid is `θ_j = −π + 2πj/N` with angles `(θ, −θ)`; for
/// n = 3 it is the product grid over `(θ₁, θ₂)` with `θ₃ = −θ₁ − θ₂`.
pub fn weyl_grid(n: usize, resolution: usize) -> Result<Vec<(SmallVec<[f64; 3]>, f64)>, SunError> {
    check_n(n)?;
    if resolution < MIN_RESOLUTION {
        return Err(SunError::Resolution(resolution));
    }
    let theta = |j: usize| -PI + 2.0 * PI * j as f64 / resolution as f64;
    let mut pts: Vec<(SmallVec<[f64; 3]>, f64)> = Vec::new();
    match n {
        2 => {
            for j in 0..resolution {
                let a: SmallVec<[f64; 3]> = SmallVec::from_slice(&[theta(j), -theta(j)]);
                let w = haar_log_volume(&a).exp();
                pts.push((a, w));
            }
        }
        _ => {
            for j in 0..resolution {
                for k in 0..resolution {
                    let (t1, t2) = (theta(j), theta(k));
                    let a: SmallVec<[f64; 3]> = SmallVec::from_slice(&[t1, t2, -t1 - t2]);
                    let w = haar_log_volume(&a).exp();
                    pts.push((a, w));
                }
            }
        }
    }
    let total: f64 = pts.iter().map(|p| p.1).sum();
    for p in pts.iter_mut() {
        p.1 /= total;
    }
    Ok(pts)
}

/// Haar integral of a class function given on eigen-angles.
pub fn weyl_quadrature(n: usize, resolution: usize, f: impl Fn(&[f64]) -> f64) -> Result<f64, SunError> {
    Ok(weyl_grid(n, resolution)?.iter().map(|(a, w)| w * f(a)).sum())
}

/// Diagonal SU(n) element with the given angles.
pub fn diagonal(angles: &[f64]) -> CMatrix<f64> {
    let d: SmallVec<[Complex<f64>; 3]> = angles.iter().map(|&t| Complex::cis(t)).collect();
    CMatrix::diag(&d)
}

/// Eigen-angles with first and second derivatives along each direction
/// `A_k`, i.e. along the curves `u·exp(εA_k)`.
#[derive(Debug, Clone)]
pub struct AngleJets<S> {
    pub theta: SmallVec<[S; 3]>,
    /// `d1[k][i]`: first derivative of angle `i` along direction `k`.
    pub d1: Vec<SmallVec<[S; 3]>>,
    pub d2: Vec<SmallVec<[S; 3]>>,
}

/// Quantity with value `value` whose first-order sensitivity to each
/// carrier in `terms` is the paired coefficient.
fn attach<S: Real>(value: f64, terms: &[(f64, S)]) -> S {
    let shifted: SmallVec<[(f64, S); 6]> =
        terms.iter().filter(|(w, _)| *w != 0.0).map(|&(w, x)| (w, x - x.value())).collect();
    S::lin_comb(&shifted) + value
}

/// Angle jets of `u` along the directions `dirs` (with squares `dirs_sq`).
///
/// SU(2) is exact for every carrier. For SU(3) the roots are obtained in
/// `f64` and re-attached to `u` through implicit differentiation of the
/// characteristic polynomial, so derivatives *with respect to `u`* are
/// exact to first order only: valid for `f64` and taped scalars, not for
/// nested jets.
pub fn angle_jets<S: Real>(
    u: &CMatrix<S>,
    dirs: &[CMatrix<f64>],
    dirs_sq: &[CMatrix<f64>],
) -> Result<AngleJets<S>, SunError> {
    match u.n() {
        2 => Ok(angle_jets_su2(u, dirs, dirs_sq)),
        3 => angle_jets_su3(u, dirs, dirs_sq),
        n => Err(SunError::UnsupportedDimension(n)),
    }
}

fn angle_jets_su2<S: Real>(u: &CMatrix<S>, dirs: &[CMatrix<f64>], dirs_sq: &[CMatrix<f64>]) -> AngleJets<S> {
    let a = u.trace().re * 0.5;
    let th = su2_angle(Jet2::variable(a));
    let mut d1 = Vec::with_capacity(dirs.len());
    let mut d2 = Vec::with_capacity(dirs.len());
    for (x, x2) in dirs.iter().zip(dirs_sq) {
        let a1 = u.trace_dot_const(x).re * 0.5;
        let a2 = u.trace_dot_const(x2).re * 0.5;
        let t1 = th.d1 * a1;
        let t2 = S::sum_prod(&[(1.0, th.d2, a1 * a1), (1.0, th.d1, a2)]);
        d1.push(SmallVec::from_slice(&[-t1, t1]));
        d2.push(SmallVec::from_slice(&[-t2, t2]));
    }
    AngleJets { theta: SmallVec::from_slice(&[-th.v, th.v]), d1, d2 }
}

fn angle_jets_su3<S: Real>(
    u: &CMatrix<S>,
    dirs: &[CMatrix<f64>],
    dirs_sq: &[CMatrix<f64>],
) -> Result<AngleJets<S>, SunError> {
    let c = char_poly_su3(u);
    let cv = [c[0].value(), c[1].value(), c[2].value()];
    let mut roots = cardano(&cv);
    let mut worst: f64 = 0.0;
    for r in &roots {
        worst = worst.max(poly_eval(&cv, *r).abs());
    }
    if !(worst <= RESIDUAL_TOL) {
        return Err(SunError::EigenFallback(worst));
    }
    roots.sort_by(|a, b| a.arg().total_cmp(&b.arg()));

    // dλ = −(λ² dc₂ + λ dc₁ + dc₀) / P′(λ)
    let lambdas: SmallVec<[Complex<S>; 3]> = roots
        .iter()
        .map(|&l0| {
            let dp = l0 * l0 * Complex::cst(3.0, 0.0) + l0 * cv[0] * Complex::cst(2.0, 0.0) + cv[1];
            let w = -dp.recip();
            let mut re: SmallVec<[(f64, S); 6]> = SmallVec::new();
            let mut im: SmallVec<[(f64, S); 6]> = SmallVec::new();
            for (m, cj) in [(w * l0 * l0, c[0]), (w * l0, c[1]), (w, c[2])] {
                re.push((m.re, cj.re));
                re.push((-m.im, cj.im));
                im.push((m.im, cj.re));
                im.push((m.re, cj.im));
            }
            Complex::new(attach(l0.re, &re), attach(l0.im, &im))
        })
        .collect();
    let theta: SmallVec<[S; 3]> = lambdas.iter().map(|l| l.arg()).collect();

    let c2 = c[0];
    let c1 = c[1];
    let per_root: SmallVec<[(Complex<S>, Complex<S>, Complex<S>, Complex<S>); 3]> = lambdas
        .iter()
        .map(|&l| {
            let pl = l * l * Complex::cst(3.0, 0.0) + c2 * l * Complex::cst(2.0, 0.0) + c1;
            let pll = l.scale(6.0) + c2.scale(2.0);
            (l, pl.recip(), pll, l.recip())
        })
        .collect();

    let mut d1 = Vec::with_capacity(dirs.len());
    let mut d2 = Vec::with_capacity(dirs.len());
    for (x, x2) in dirs.iter().zip(dirs_sq) {
        // On SU(3): c₂ = −tr u, c₁ = conj(tr u), c₀ = −1 along the curve.
        let t1 = u.trace_dot_const(x);
        let t2 = u.trace_dot_const(x2);
        let (c2d, c2dd) = (-t1, -t2);
        let (c1d, c1dd) = (t1.conj(), t2.conj());
        let mut k1: SmallVec<[S; 3]> = SmallVec::new();
        let mut k2: SmallVec<[S; 3]> = SmallVec::new();
        for &(l, inv_pl, pll, inv_l) in &per_root {
            let pe = (c2d * l + c1d) * l;
            let ple = c2d * l * Complex::cst(2.0, 0.0) + c1d;
            let pee = (c2dd * l + c1dd) * l;
            let l1 = -(pe * inv_pl);
            let l2 = -((pll * l1 * l1 + ple * l1 * Complex::cst(2.0, 0.0) + pee) * inv_pl);
            let r1 = l1 * inv_l;
            let r2 = l2 * inv_l;
            k1.push(r1.im);
            k2.push(r2.im - S::sum_prod(&[(2.0, r1.re, r1.im)]));
        }
        d1.push(k1);
        d2.push(k2);
    }
    Ok(AngleJets { theta, d1, d2 })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn basis_is_orthonormal_and_traceless_skew() {
        for n in [2, 3] {
            let b = basis(n).unwrap();
            assert_eq!(b.len(), n * n - 1);
            for a in b {
                assert!(crate::linalg::skew_deviation(a) < 1e-15);
            }
        }
    }

    #[test]
    fn su2_angles_examples() {
        let id = SpecialUnitary::identity(2);
        let a = eig_su2(&id).unwrap();
        assert!(a.as_slice().iter().all(|t| t.abs() < 1e-5));
        let d = SpecialUnitary::new(diagonal(&[PI / 2.0, -PI / 2.0])).unwrap();
        let a = eig_su2(&d).unwrap();
        assert!((a.as_slice()[0] + PI / 2.0).abs() < 1e-12);
        assert!((a.as_slice()[1] - PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn su3_angles_examples() {
        let a = eig_su3(&SpecialUnitary::identity(3)).unwrap();
        assert!(a.as_slice().iter().all(|t| t.abs() < 1e-12), "{a:?}");
        let want = [-5.0 * PI / 6.0, PI / 3.0, PI / 2.0];
        let d = SpecialUnitary::new(diagonal(&[PI / 2.0, PI / 3.0, -5.0 * PI / 6.0])).unwrap();
        let a = eig_su3(&d).unwrap();
        for (x, y) in a.as_slice().iter().zip(want) {
            assert!((x - y).abs() < 1e-9, "{a:?}");
        }
    }

    #[test]
    fn haar_samples_are_special_unitary_and_deterministic() {
        for n in [2, 3] {
            let u = haar_sample(n, &mut rng(3)).unwrap();
            let (du, dd) = unitarity_defect(u.matrix());
            assert!(du <= 1e-12 && dd <= 1e-12);
            assert_eq!(u, haar_sample(n, &mut rng(3)).unwrap());
        }
    }

    #[test]
    fn log_volume_examples() {
        assert_eq!(haar_log_volume(&[0.0, 0.0]), f64::NEG_INFINITY);
        assert!((haar_log_volume(&[-PI / 2.0, PI / 2.0]) - 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn residual_and_determinant_constraint() {
        let mut r = rng(11);
        for n in [2, 3] {
            for _ in 0..200 {
                let u = haar_sample(n, &mut r).unwrap();
                let a = eigen_angles(&u).unwrap();
                assert!(char_poly_residual(u.matrix(), a.as_slice()) <= 1e-8);
                let s: f64 = a.as_slice().iter().sum();
                assert!((Complex::<f64>::cis(s) - Complex::one()).abs() <= 1e-8);
            }
        }
    }

    #[test]
    fn frame_at_identity_is_basis() {
        for n in [2, 3] {
            let f = tangent_frame(&SpecialUnitary::identity(n));
            assert_eq!(f.as_slice(), basis(n).unwrap());
        }
    }

    #[test]
    fn geodesic_half_steps_compose() {
        let mut r = rng(5);
        let u = haar_sample(3, &mut r).unwrap();
        let w: Vec<f64> = (0..8).map(|_| r.random_range(-1.0..1.0)).collect();
        assert_eq!(geodesic_step(&u, &vec![0.0; 8], 0.3).unwrap(), u);
        let half = geodesic_step(&geodesic_step(&u, &w, 0.35).unwrap(), &w, 0.35).unwrap();
        let full = geodesic_step(&u, &w, 0.7).unwrap();
        assert!(half.matrix().sub(full.matrix()).norm_fro() <= 1e-11);
    }

    #[test]
    fn quadrature_constant_and_resolution() {
        assert!((weyl_quadrature(2, 64, |_| 1.0).unwrap() - 1.0).abs() < 1e-15);
        assert!((weyl_quadrature(3, 32, |_| 1.0).unwrap() - 1.0).abs() < 1e-14);
        assert_eq!(weyl_quadrature(2, 8, |_| 1.0), Err(SunError::Resolution(8)));
    }

    #[test]
    fn projection_restores_invariants() {
        let u = haar_sample(3, &mut rng(1)).unwrap();
        let drifted = u.matrix().scale(1.0 + 2e-10);
        let p = SpecialUnitary::new(drifted).unwrap();
        let (du, dd) = unitarity_defect(p.matrix());
        assert!(du < 1e-13 && dd < 1e-13);
        assert!(SpecialUnitary::new(u.matrix().scale(1.01)).is_err());
    }

    fn jets_along(u: &CMatrix<f64>, a: &CMatrix<f64>) -> Vec<Jet2<f64>> {
        let ua = u.dot(a);
        let uaa = ua.dot(a);
        let m = CMatrix::from_fn(u.n(), |i, j| Complex {
            re: Jet2::new(u[(i, j)].re, ua[(i, j)].re, uaa[(i, j)].re),
            im: Jet2::new(u[(i, j)].im, ua[(i, j)].im, uaa[(i, j)].im),
        });
        eig_generic(&m).unwrap().to_vec()
    }

    #[test]
    fn angle_jets_match_generic_cardano_jets() {
        let mut r = rng(21);
        for n in [2, 3] {
            let dirs = basis(n).unwrap();
            let sq = basis_squares(n).unwrap();
            for _ in 0..50 {
                let u = haar_sample(n, &mut r).unwrap();
                let j = angle_jets(u.matrix(), dirs, sq).unwrap();
                let plain = eig_generic(u.matrix()).unwrap();
                for i in 0..n {
                    assert!((j.theta[i] - plain[i]).abs() < 1e-13);
                }
                for (k, a) in dirs.iter().enumerate() {
                    let oracle = jets_along(u.matrix(), a);
                    for i in 0..n {
                        let s = 1.0 + oracle[i].d1.abs() + oracle[i].d2.abs();
                        assert!((j.d1[k][i] - oracle[i].d1).abs() < 1e-8 * s, "n={n} k={k} i={i}");
                        assert!((j.d2[k][i] - oracle[i].d2).abs() < 1e-7 * s, "n={n} k={k} i={i}");
                    }
                }
            }
        }
    }
}
