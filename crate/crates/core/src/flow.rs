//! Equivariant manifold continuous normalizing flow.
//!
//! The vector field is the Riemannian gradient of a potential, assembled in
//! an orthonormal frame; its divergence is the Laplace–Beltrami operator of
//! the potential, i.e. the sum of second derivatives along the frame
//! geodesics. Integration is fourth-order Runge–Kutta–Munthe-Kaas: every
//! stage moves by the exponential of a Lie-algebra element, so iterates stay
//! on the manifold.
//!
//! Sign convention for `delta_log`: a forward pass accumulates `−∫div`, a
//! reverse pass `+∫div` along the reversed path, so composing the two gives
//! zero.

use std::f64::consts::PI;
use std::sync::Arc;

use smallvec::SmallVec;
use thiserror::Error;

use crate::diff::{Jet2, Real};
use crate::linalg::{expm, su2_exp, CMatrix, Complex};
use crate::potentials::{phi_sphere, phi_sun, DeepSetParams, MlpParams, Model, NetScalar};
use crate::sphere::{cross, frame_generic, rotate_generic};
use crate::sun::{angle_jets, basis, basis_squares, SunError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum FlowError {
    #[error(transparent)]
    Sun(#[from] SunError),
    #[error("integration diverged at step {step}")]
    Diverged { step: usize },
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("potential does not match the manifold")]
    Mismatch,
}

pub type Coeffs<S> = SmallVec<[S; 8]>;

/// A homogeneous manifold with an orthonormal frame, a Lie-algebra action
/// and geodesic jets along the frame.
pub trait Manifold {
    type Point<S: Real>: Clone + std::fmt::Debug;
    type Alg<S: Real>: Clone + std::fmt::Debug;

    fn frame_dim(&self) -> usize;
    /// Log density of the uniform prior with respect to the reference
    /// measure of the manifold.
    fn prior_log_density(&self) -> f64;
    fn lift<S: Real>(&self, p: &Self::Point<f64>) -> Self::Point<S>;
    fn primal<S: Real>(&self, p: &Self::Point<S>) -> Self::Point<f64>;
    /// Second-order jets of the unit-speed geodesics through `p` along each
    /// frame direction.
    fn frame_jets<S: Real>(&self, p: &Self::Point<S>) -> Vec<Self::Point<Jet2<S>>>;
    /// Algebra element moving `p` with velocity `Σ c_k E_k`.
    fn assemble<S: Real>(&self, p: &Self::Point<S>, coeffs: &[S]) -> Self::Alg<S>;
    /// Ambient tangent vector `Σ c_k E_k` at `p`.
    fn ambient(&self, p: &Self::Point<f64>, coeffs: &[f64]) -> Self::Point<f64>;
    fn act<S: Real>(&self, p: &Self::Point<S>, a: &Self::Alg<S>) -> Self::Point<S>;
    /// Truncated inverse differential of the exponential for the action
    /// used by [`Manifold::act`].
    fn dexpinv<S: Real>(&self, omega: &Self::Alg<S>, xi: &Self::Alg<S>) -> Self::Alg<S>;
    fn alg_comb<S: Real>(&self, terms: &[(f64, &Self::Alg<S>)]) -> Self::Alg<S>;
    fn is_finite<S: Real>(&self, p: &Self::Point<S>) -> bool;
    /// Ambient Euclidean distance.
    fn distance(&self, a: &Self::Point<f64>, b: &Self::Point<f64>) -> f64;
}

/// SU(n) with the left-translated frame `{u·A_k}` and right action
/// `u ↦ u·exp(Ω)`.
#[derive(Debug, Clone)]
pub struct SunManifold {
    n: usize,
    basis: Vec<CMatrix<f64>>,
    squares: Vec<CMatrix<f64>>,
}

impl SunManifold {
    pub fn new(n: usize) -> Result<Self, FlowError> {
        Ok(Self { n, basis: basis(n)?.to_vec(), squares: basis_squares(n)?.to_vec() })
    }

    /// Same manifold with the frame rotated by an orthogonal matrix
    /// (`rot[k][j]`, row-major `d × d`).
    pub fn with_rotated_frame(n: usize, rot: &[Vec<f64>]) -> Result<Self, FlowError> {
        let b = basis(n)?;
        let basis: Vec<CMatrix<f64>> = rot.iter().map(|row| CMatrix::combine(n, row, b)).collect();
        let squares = basis.iter().map(|a| a.dot(a)).collect();
        Ok(Self { n, basis, squares })
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn basis(&self) -> &[CMatrix<f64>] {
        &self.basis
    }
}

impl Manifold for SunManifold {
    type Point<S: Real> = CMatrix<S>;
    type Alg<S: Real> = CMatrix<S>;

    fn frame_dim(&self) -> usize {
        self.basis.len()
    }

    fn prior_log_density(&self) -> f64 {
        0.0
    }

    fn lift<S: Real>(&self, p: &CMatrix<f64>) -> CMatrix<S> {
        CMatrix::lift(p)
    }

    fn primal<S: Real>(&self, p: &CMatrix<S>) -> CMatrix<f64> {
        p.value()
    }

    fn frame_jets<S: Real>(&self, p: &CMatrix<S>) -> Vec<CMatrix<Jet2<S>>> {
        self.basis
            .iter()
            .zip(&self.squares)
            .map(|(a, a2)| {
                let d1 = p.dot_const(a);
                let d2 = p.dot_const(a2);
                CMatrix::from_fn(self.n, |i, j| Complex {
                    re: Jet2::new(p[(i, j)].re, d1[(i, j)].re, d2[(i, j)].re),
                    im: Jet2::new(p[(i, j)].im, d1[(i, j)].im, d2[(i, j)].im),
                })
            })
            .collect()
    }

    fn assemble<S: Real>(&self, _: &CMatrix<S>, coeffs: &[S]) -> CMatrix<S> {
        CMatrix::combine(self.n, coeffs, &self.basis)
    }

    fn ambient(&self, p: &CMatrix<f64>, coeffs: &[f64]) -> CMatrix<f64> {
        p.dot(&CMatrix::combine(self.n, coeffs, &self.basis))
    }

    fn act<S: Real>(&self, p: &CMatrix<S>, a: &CMatrix<S>) -> CMatrix<S> {
        if self.n == 2 { p.dot(&su2_exp(a)) } else { p.dot(&expm(a)) }
    }

    fn dexpinv<S: Real>(&self, omega: &CMatrix<S>, xi: &CMatrix<S>) -> CMatrix<S> {
        // right action: ξ + ½[Ω, ξ] + (1/12)[Ω, [Ω, ξ]]
        let c1 = omega.commutator(xi);
        let c2 = omega.commutator(&c1);
        self.alg_comb(&[(1.0, xi), (0.5, &c1), (1.0 / 12.0, &c2)])
    }

    fn alg_comb<S: Real>(&self, terms: &[(f64, &CMatrix<S>)]) -> CMatrix<S> {
        let mut re: SmallVec<[(f64, S); 6]> = SmallVec::new();
        let mut im: SmallVec<[(f64, S); 6]> = SmallVec::new();
        CMatrix::from_fn(self.n, |i, j| {
            re.clear();
            im.clear();
            for &(c, m) in terms {
                re.push((c, m[(i, j)].re));
                im.push((c, m[(i, j)].im));
            }
            Complex { re: S::lin_comb(&re), im: S::lin_comb(&im) }
        })
    }

    fn is_finite<S: Real>(&self, p: &CMatrix<S>) -> bool {
        p.is_finite()
    }

    fn distance(&self, a: &CMatrix<f64>, b: &CMatrix<f64>) -> f64 {
        a.sub(b).norm_fro()
    }
}

/// S² with the frame of [`frame_generic`] (optionally gauge-rotated) and
/// the left rotation action `p ↦ exp(ω̂)p`.
#[derive(Debug, Clone, Default)]
pub struct SphereManifold {
    pub gauge: f64,
}

impl SphereManifold {
    pub fn new() -> Self {
        Self { gauge: 0.0 }
    }
}

impl Manifold for SphereManifold {
    type Point<S: Real> = [S; 3];
    type Alg<S: Real> = [S; 3];

    fn frame_dim(&self) -> usize {
        2
    }

    fn prior_log_density(&self) -> f64 {
        -(4.0 * PI).ln()
    }

    fn lift<S: Real>(&self, p: &[f64; 3]) -> [S; 3] {
        p.map(S::cst)
    }

    fn primal<S: Real>(&self, p: &[S; 3]) -> [f64; 3] {
        p.map(|x| x.value())
    }

    fn frame_jets<S: Real>(&self, p: &[S; 3]) -> Vec<[Jet2<S>; 3]> {
        frame_generic(p, self.gauge)
            .iter()
            .map(|e| [0, 1, 2].map(|i| Jet2::new(p[i], e[i], -p[i])))
            .collect()
    }

    fn assemble<S: Real>(&self, p: &[S; 3], coeffs: &[S]) -> [S; 3] {
        let [e1, e2] = frame_generic(p, self.gauge);
        let x = [0, 1, 2].map(|i| S::sum_prod(&[(1.0, coeffs[0], e1[i]), (1.0, coeffs[1], e2[i])]));
        cross(p, &x)
    }

    fn ambient(&self, p: &[f64; 3], coeffs: &[f64]) -> [f64; 3] {
        let [e1, e2] = frame_generic(p, self.gauge);
        [0, 1, 2].map(|i| coeffs[0] * e1[i] + coeffs[1] * e2[i])
    }

    fn act<S: Real>(&self, p: &[S; 3], a: &[S; 3]) -> [S; 3] {
        rotate_generic(p, a)
    }

    fn dexpinv<S: Real>(&self, omega: &[S; 3], xi: &[S; 3]) -> [S; 3] {
        // left action: ξ − ½[Ω, ξ] + (1/12)[Ω, [Ω, ξ]], bracket = cross product
        let c1 = cross(omega, xi);
        let c2 = cross(omega, &c1);
        self.alg_comb(&[(1.0, xi), (-0.5, &c1), (1.0 / 12.0, &c2)])
    }

    fn alg_comb<S: Real>(&self, terms: &[(f64, &[S; 3])]) -> [S; 3] {
        [0, 1, 2].map(|i| {
            let t: SmallVec<[(f64, S); 6]> = terms.iter().map(|&(c, v)| (c, v[i])).collect();
            S::lin_comb(&t)
        })
    }

    fn is_finite<S: Real>(&self, p: &[S; 3]) -> bool {
        p.iter().all(Real::is_finite)
    }

    fn distance(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        (0..3).map(|i| (a[i] - b[i]).powi(2)).sum::<f64>().sqrt()
    }
}

/// A potential that can report its frame gradient and Laplacian.
pub trait Potential<M: Manifold, S: Real> {
    /// `(∇Φ in frame coordinates, ΔΦ)` at `(p, t)`.
    fn grad_div(&self, m: &M, p: &M::Point<S>, t: f64) -> Result<(Coeffs<S>, S), FlowError>;
}

/// Scalar function of a point, written once for every carrier.
pub trait ScalarField<M: Manifold> {
    fn eval<S: Real>(&self, m: &M, p: &M::Point<S>, t: f64) -> Result<S, FlowError>;
}

/// Gradient and Laplacian of any [`ScalarField`] by one second-order jet
/// sweep per frame direction.
pub struct Sweep<F>(pub F);

impl<M: Manifold, S: Real, F: ScalarField<M>> Potential<M, S> for Sweep<F> {
    fn grad_div(&self, m: &M, p: &M::Point<S>, t: f64) -> Result<(Coeffs<S>, S), FlowError> {
        let mut coeffs = Coeffs::new();
        let mut lap: SmallVec<[(f64, S); 8]> = SmallVec::new();
        for jet in m.frame_jets(p) {
            let j = self.0.eval::<Jet2<S>>(m, &jet, t)?;
            coeffs.push(j.d1);
            lap.push((1.0, j.d2));
        }
        Ok((coeffs, S::lin_comb(&lap)))
    }
}

/// Plain DeepSet potential as a scalar field.
pub struct PhiSun<'a>(pub &'a DeepSetParams);

impl ScalarField<SunManifold> for PhiSun<'_> {
    fn eval<S: Real>(&self, _: &SunManifold, p: &CMatrix<S>, t: f64) -> Result<S, FlowError> {
        Ok(phi_sun(self.0, p, t)?)
    }
}

/// Plain sphere potential as a scalar field.
pub struct PhiSphere<'a>(pub &'a MlpParams);

impl ScalarField<SphereManifold> for PhiSphere<'_> {
    fn eval<S: Real>(&self, _: &SphereManifold, p: &[S; 3], t: f64) -> Result<S, FlowError> {
        Ok(phi_sphere(self.0, p, t))
    }
}

/// Network potential evaluated by the Taylor route: one fused network pass
/// yields the input gradient and Hessian, which are chained with the
/// directional jets of the network inputs.
pub struct NetPotential<S: NetScalar> {
    pub model: Arc<Model>,
    pub binding: S::Binding,
}

impl NetPotential<f64> {
    pub fn plain(model: Arc<Model>) -> Self {
        Self { model, binding: () }
    }
}

/// `d1 = Σ gᵢ xᵢ′`, `d2 = Σ Hᵢⱼ xᵢ′ xⱼ′ + Σ gᵢ xᵢ″`.
fn chain_jets<S: Real>(grad: &[S], hess: &[S], d1: &[S], d2: &[S]) -> (S, S) {
    let k = grad.len();
    let first: SmallVec<[(f64, S, S); 3]> = (0..k).map(|i| (1.0, grad[i], d1[i])).collect();
    let mut second: SmallVec<[(f64, S, S); 6]> = SmallVec::new();
    for i in 0..k {
        let row: SmallVec<[(f64, S, S); 3]> = (0..k).map(|j| (1.0, hess[i * k + j], d1[j])).collect();
        second.push((1.0, S::sum_prod(&row), d1[i]));
        second.push((1.0, grad[i], d2[i]));
    }
    (S::sum_prod(&first), S::sum_prod(&second))
}

impl<S: NetScalar> Potential<SunManifold, S> for NetPotential<S> {
    fn grad_div(&self, m: &SunManifold, p: &CMatrix<S>, t: f64) -> Result<(Coeffs<S>, S), FlowError> {
        if !matches!(self.model.as_ref(), Model::Sun(d) if d.n == m.n) {
            return Err(FlowError::Mismatch);
        }
        let jets = angle_jets(p, &m.basis, &m.squares)?;
        let tay = S::taylor(&self.model, &self.binding, &jets.theta, t);
        let mut coeffs = Coeffs::new();
        let mut lap: SmallVec<[(f64, S); 8]> = SmallVec::new();
        for (a1, a2) in jets.d1.iter().zip(&jets.d2) {
            let (d1, d2) = chain_jets(&tay.grad, &tay.hess, a1, a2);
            coeffs.push(d1);
            lap.push((1.0, d2));
        }
        Ok((coeffs, S::lin_comb(&lap)))
    }
}

impl<S: NetScalar> Potential<SphereManifold, S> for NetPotential<S> {
    fn grad_div(&self, m: &SphereManifold, p: &[S; 3], t: f64) -> Result<(Coeffs<S>, S), FlowError> {
        if !matches!(self.model.as_ref(), Model::Sphere(_)) {
            return Err(FlowError::Mismatch);
        }
        let tay = S::taylor(&self.model, &self.binding, &[p[2]], t);
        let z2 = -p[2];
        let mut coeffs = Coeffs::new();
        let mut lap: SmallVec<[(f64, S); 8]> = SmallVec::new();
        for e in frame_generic(p, m.gauge) {
            let (d1, d2) = chain_jets(&tay.grad, &tay.hess, &[e[2]], &[z2]);
            coeffs.push(d1);
            lap.push((1.0, d2));
        }
        Ok((coeffs, S::lin_comb(&lap)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FlowConfig {
    pub steps: usize,
    pub t_final: f64,
    pub direction: Direction,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self { steps: 20, t_final: 1.0, direction: Direction::Forward }
    }
}

impl FlowConfig {
    pub fn with_direction(self, direction: Direction) -> Self {
        Self { direction, ..self }
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if self.steps < 4 {
            return Err(FlowError::Config(format!("steps = {} (need at least 4)", self.steps)));
        }
        if !(self.t_final > 0.0) || !self.t_final.is_finite() {
            return Err(FlowError::Config(format!("t_final = {} (need > 0)", self.t_final)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct FlowResult<P, S> {
    pub endpoint: P,
    pub delta_log: S,
}

pub fn riemannian_grad<M: Manifold, S: Real, P: Potential<M, S>>(
    m: &M,
    pot: &P,
    p: &M::Point<S>,
    t: f64,
) -> Result<Coeffs<S>, FlowError> {
    Ok(pot.grad_div(m, p, t)?.0)
}

pub fn divergence<M: Manifold, S: Real, P: Potential<M, S>>(
    m: &M,
    pot: &P,
    p: &M::Point<S>,
    t: f64,
) -> Result<S, FlowError> {
    Ok(pot.grad_div(m, p, t)?.1)
}

/// Fixed-step RKMK4 integration of `X = ∇Φ` with log-density accounting.
pub fn integrate<M: Manifold, S: Real, P: Potential<M, S>>(
    m: &M,
    pot: &P,
    start: &M::Point<S>,
    cfg: &FlowConfig,
) -> Result<FlowResult<M::Point<S>, S>, FlowError> {
    cfg.validate()?;
    let h = cfg.t_final / cfg.steps as f64;
    let sign = match cfg.direction {
        Direction::Forward => 1.0,
        Direction::Reverse => -1.0,
    };
    let sh = sign * h;
    let field = |y: &M::Point<S>, s: f64| -> Result<(M::Alg<S>, S), FlowError> {
        let t = if sign > 0.0 { s } else { cfg.t_final - s };
        let (c, div) = pot.grad_div(m, y, t)?;
        let xi = m.assemble(y, &c);
        Ok((m.alg_comb(&[(sh, &xi)]), div))
    };
    let mut y = start.clone();
    let mut divs: Vec<(f64, S)> = Vec::with_capacity(4 * cfg.steps);
    for step in 0..cfg.steps {
        let s0 = step as f64 * h;
        let (k1, d1) = field(&y, s0)?;
        let half1 = m.alg_comb(&[(0.5, &k1)]);
        let (f2, d2) = field(&m.act(&y, &half1), s0 + 0.5 * h)?;
        let k2 = m.dexpinv(&half1, &f2);
        let half2 = m.alg_comb(&[(0.5, &k2)]);
        let (f3, d3) = field(&m.act(&y, &half2), s0 + 0.5 * h)?;
        let k3 = m.dexpinv(&half2, &f3);
        let (f4, d4) = field(&m.act(&y, &k3), s0 + h)?;
        let k4 = m.dexpinv(&k3, &f4);
        let omega = m.alg_comb(&[(1.0 / 6.0, &k1), (1.0 / 3.0, &k2), (1.0 / 3.0, &k3), (1.0 / 6.0, &k4)]);
        y = m.act(&y, &omega);
        let w = -sh / 6.0;
        divs.extend([(w, d1), (2.0 * w, d2), (2.0 * w, d3), (w, d4)]);
        let bad = !m.is_finite(&y) || [d1, d2, d3, d4].iter().any(|d| !d.is_finite());
        if bad {
            return Err(FlowError::Diverged { step });
        }
    }
    Ok(FlowResult { endpoint: y, delta_log: S::lin_comb(&divs) })
}

/// Forward-push a prior draw: `(x, log q(x))`.
pub fn push_sample<M: Manifold, S: Real, P: Potential<M, S>>(
    m: &M,
    pot: &P,
    u: &M::Point<S>,
    cfg: &FlowConfig,
) -> Result<(M::Point<S>, S), FlowError> {
    let r = integrate(m, pot, u, &cfg.with_direction(Direction::Forward))?;
    Ok((r.endpoint, r.delta_log + m.prior_log_density()))
}

/// `log q(x)`: pull `x` back to the prior and subtract the reverse pass's
/// accumulated `+∫div`.
pub fn model_log_density<M: Manifold, S: Real, P: Potential<M, S>>(
    m: &M,
    pot: &P,
    x: &M::Point<S>,
    cfg: &FlowConfig,
) -> Result<S, FlowError> {
    let r = integrate(m, pot, x, &cfg.with_direction(Direction::Reverse))?;
    Ok(-r.delta_log + m.prior_log_density())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{init_params, Arch};
    use crate::sun::{conjugate, haar_sample, SpecialUnitary};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    struct ReTrace;

    impl ScalarField<SunManifold> for ReTrace {
        fn eval<S: Real>(&self, _: &SunManifold, p: &CMatrix<S>, _: f64) -> Result<S, FlowError> {
            Ok(p.trace().re)
        }
    }

    struct ZCoord;

    impl ScalarField<SphereManifold> for ZCoord {
        fn eval<S: Real>(&self, _: &SphereManifold, p: &[S; 3], _: f64) -> Result<S, FlowError> {
            Ok(p[2])
        }
    }

    struct Const;

    impl ScalarField<SunManifold> for Const {
        fn eval<S: Real>(&self, _: &SunManifold, _: &CMatrix<S>, _: f64) -> Result<S, FlowError> {
            Ok(S::cst(2.5))
        }
    }

    fn random_model(arch: &Arch, seed: u64, scale: f64) -> Arc<Model> {
        let mut m = init_params(arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        let flat: Vec<f64> = m.to_flat().iter().map(|&x| if x == 0.0 { rng.random_range(-scale..scale) } else { x }).collect();
        m.set_flat(&flat).unwrap();
        Arc::new(m)
    }

    #[test]
    fn constant_potential_has_no_gradient_or_divergence() {
        let m = SunManifold::new(2).unwrap();
        let u = haar_sample(2, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let (c, d) = Sweep(Const).grad_div(&m, u.matrix(), 0.0).unwrap();
        assert!(c.iter().all(|x| *x == 0.0) && d == 0.0);
    }

    #[test]
    fn trace_gradient_matches_finite_differences() {
        let m = SunManifold::new(2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let u = haar_sample(2, &mut rng).unwrap();
            let c = riemannian_grad(&m, &Sweep(ReTrace), u.matrix(), 0.0).unwrap();
            for (k, a) in m.basis().iter().enumerate() {
                let f = |h: f64| u.matrix().dot(&expm(&a.scale(h))).trace().re;
                let fd = (f(1e-5) - f(-1e-5)) / 2e-5;
                assert!((c[k] - fd).abs() <= 1e-6 * fd.abs().max(1e-3));
            }
        }
    }

    #[test]
    fn sphere_laplacian_of_z() {
        let m = SphereManifold::new();
        let d = divergence(&m, &Sweep(ZCoord), &[0.0, 0.0, 1.0], 0.0).unwrap();
        assert!((d + 2.0).abs() < 1e-14);
        let p = [0.48, -0.6, 0.64];
        let d = divergence(&m, &Sweep(ZCoord), &p, 0.0).unwrap();
        assert!((d + 2.0 * 0.64).abs() < 1e-14);
    }

    #[test]
    fn taylor_route_matches_sweep_route() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2, 3] {
            let model = random_model(&Arch::deepset(n), n as u64, 0.5);
            let Model::Sun(d) = model.as_ref() else { unreachable!() };
            let m = SunManifold::new(n).unwrap();
            let fast = NetPotential::plain(Arc::clone(&model));
            for _ in 0..20 {
                let u = haar_sample(n, &mut rng).unwrap();
                let t = rng.random_range(0.0..1.0);
                let (c1, d1) = fast.grad_div(&m, u.matrix(), t).unwrap();
                let (c2, d2) = Sweep(PhiSun(d)).grad_div(&m, u.matrix(), t).unwrap();
                for (a, b) in c1.iter().zip(&c2) {
                    assert!((a - b).abs() <= 1e-9 * (1.0 + b.abs()), "{a} {b}");
                }
                assert!((d1 - d2).abs() <= 1e-8 * (1.0 + d2.abs()), "{d1} {d2}");
            }
        }
        let model = random_model(&Arch::zmlp(), 4, 0.5);
        let Model::Sphere(p) = model.as_ref() else { unreachable!() };
        let m = SphereManifold::new();
        let fast = NetPotential::plain(Arc::clone(&model));
        for _ in 0..20 {
            let x = crate::sphere::uniform_sample(&mut rng).coords();
            let (c1, d1) = fast.grad_div(&m, &x, 0.3).unwrap();
            let (c2, d2) = Sweep(PhiSphere(p)).grad_div(&m, &x, 0.3).unwrap();
            for (a, b) in c1.iter().zip(&c2) {
                assert!((a - b).abs() <= 1e-12);
            }
            assert!((d1 - d2).abs() <= 1e-12);
        }
    }

    #[test]
    fn zero_potential_is_identity_flow() {
        let model = Arc::new(init_params(&Arch::deepset(3), 1));
        let m = SunManifold::new(3).unwrap();
        let u = haar_sample(3, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let r = integrate(&m, &NetPotential::plain(model), u.matrix(), &FlowConfig::default()).unwrap();
        assert!(m.distance(&r.endpoint, u.matrix()) <= 1e-12);
        assert_eq!(r.delta_log, 0.0);
    }

    #[test]
    fn forward_then_reverse_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for n in [2, 3] {
            let model = random_model(&Arch::deepset(n), 7, 0.5);
            let m = SunManifold::new(n).unwrap();
            let pot = NetPotential::plain(model);
            let u = haar_sample(n, &mut rng).unwrap();
            let cfg = FlowConfig::default();
            let f = integrate(&m, &pot, u.matrix(), &cfg).unwrap();
            let b = integrate(&m, &pot, &f.endpoint, &cfg.with_direction(Direction::Reverse)).unwrap();
            assert!(m.distance(&b.endpoint, u.matrix()) <= 1e-6);
            assert!((f.delta_log + b.delta_log).abs() <= 1e-6);
            assert!(f.delta_log.abs() > 1e-4, "flow should be nontrivial");
            let drift = f.endpoint.adjoint().dot(&f.endpoint).sub(&CMatrix::identity(n)).norm_fro();
            assert!(drift <= 1e-9);
        }
    }

    #[test]
    fn push_and_density_are_consistent() {
        let model = random_model(&Arch::zmlp(), 8, 0.8);
        let m = SphereManifold::new();
        let pot = NetPotential::plain(model);
        let u = [0.6, 0.0, -0.8];
        let (x, lq) = push_sample(&m, &pot, &u, &FlowConfig::default()).unwrap();
        let back = model_log_density(&m, &pot, &x, &FlowConfig::default()).unwrap();
        assert!((lq - back).abs() <= 1e-5);
        let norm = (0..3).map(|i| x[i] * x[i]).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn flow_commutes_with_conjugation() {
        let model = random_model(&Arch::deepset(3), 9, 0.5);
        let m = SunManifold::new(3).unwrap();
        let pot = NetPotential::plain(model);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let u = haar_sample(3, &mut rng).unwrap();
        let g = haar_sample(3, &mut rng).unwrap();
        let cfg = FlowConfig::default();
        let fu = integrate(&m, &pot, u.matrix(), &cfg).unwrap().endpoint;
        let gu = conjugate(&u, &g).unwrap();
        let fgu = integrate(&m, &pot, gu.matrix(), &cfg).unwrap().endpoint;
        let gfu = conjugate(&SpecialUnitary::new(fu).unwrap(), &g).unwrap();
        assert!(m.distance(&fgu, gfu.matrix()) <= 1e-6);
    }

    #[test]
    fn config_is_validated() {
        let m = SphereManifold::new();
        let pot = Sweep(PhiSphere(&MlpParams::zeros(&[2, 4, 1])));
        let bad = FlowConfig { steps: 2, ..Default::default() };
        assert!(matches!(integrate(&m, &pot, &[0.0, 0.0, 1.0], &bad), Err(FlowError::Config(_))));
    }
}
