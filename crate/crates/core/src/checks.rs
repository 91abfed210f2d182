//! Executable property suites: equivariance, numerical derivatives and the
//! Haar sampler.

use std::f64::consts::PI;
use std::fmt;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::diff::Real;
use crate::export::{interval_density, trapezoid, weyl_mass};
use crate::flow::{
    integrate, model_log_density, FlowConfig, Manifold, NetPotential, Potential, ScalarField, SphereManifold, Sweep,
    SunManifold,
};
use crate::linalg::{re_inner, CMatrix};
use crate::potentials::{phi_sphere, phi_sun, random_params, Arch, Model};
use crate::sphere::{dot, rotate_z_vec};
use crate::sun::{char_poly_residual, eigen_angles, haar_sample, SpecialUnitary};
use crate::targets::{band_sample, BandTarget, ToyCoeffs};
use crate::train::{nll_loss, nll_step, reverse_kl_loss, reverse_kl_weighted, PriorSampler, TrainError};

/// Isometries acting on a manifold, and the ambient geometry of tangent
/// vectors.
pub trait Symmetric: PriorSampler {
    type G;
    fn random_g<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self::G, TrainError>;
    fn act_point(&self, g: &Self::G, p: &Self::Point<f64>) -> Self::Point<f64>;
    /// Differential of the isometry applied to an ambient tangent vector.
    fn act_vector(&self, g: &Self::G, v: &Self::Point<f64>) -> Self::Point<f64>;
    fn inner(&self, a: &Self::Point<f64>, b: &Self::Point<f64>) -> f64;
    fn diff(&self, a: &Self::Point<f64>, b: &Self::Point<f64>) -> Self::Point<f64>;
}

impl Symmetric for SunManifold {
    type G = CMatrix<f64>;

    fn random_g<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<CMatrix<f64>, TrainError> {
        Ok(haar_sample(self.n(), rng)?.matrix().clone())
    }

    fn act_point(&self, g: &CMatrix<f64>, p: &CMatrix<f64>) -> CMatrix<f64> {
        g.dot(p).dot(&g.adjoint())
    }

    fn act_vector(&self, g: &CMatrix<f64>, v: &CMatrix<f64>) -> CMatrix<f64> {
        g.dot(v).dot(&g.adjoint())
    }

    fn inner(&self, a: &CMatrix<f64>, b: &CMatrix<f64>) -> f64 {
        re_inner(a, b)
    }

    fn diff(&self, a: &CMatrix<f64>, b: &CMatrix<f64>) -> CMatrix<f64> {
        a.sub(b)
    }
}

impl Symmetric for SphereManifold {
    type G = f64;

    fn random_g<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<f64, TrainError> {
        Ok(rng.random_range(-PI..PI))
    }

    fn act_point(&self, g: &f64, p: &[f64; 3]) -> [f64; 3] {
        rotate_z_vec(p, *g)
    }

    fn act_vector(&self, g: &f64, v: &[f64; 3]) -> [f64; 3] {
        rotate_z_vec(v, *g)
    }

    fn inner(&self, a: &[f64; 3], b: &[f64; 3]) -> f64 {
        dot(a, b)
    }

    fn diff(&self, a: &[f64; 3], b: &[f64; 3]) -> [f64; 3] {
        [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
    }
}

/// Largest `‖∇Φ(g·p) − dg ∇Φ(p)‖` over random `(p, g, t)`.
pub fn gradient_equivariance_error<M, P>(m: &M, pot: &P, trials: usize, seed: u64) -> Result<f64, TrainError>
where
    M: Symmetric,
    P: Potential<M, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let p = m.sample_prior(&mut rng)?;
        let g = m.random_g(&mut rng)?;
        let t: f64 = rng.random_range(0.0..1.0);
        let gp = m.act_point(&g, &p);
        let (c, _) = pot.grad_div(m, &p, t)?;
        let (cg, _) = pot.grad_div(m, &gp, t)?;
        let lhs = m.ambient(&gp, &cg);
        let rhs = m.act_vector(&g, &m.ambient(&p, &c));
        worst = worst.max(m.distance(&lhs, &rhs));
    }
    Ok(worst)
}

/// Largest `‖F(g·x) − g·F(x)‖` for the integrated flow.
pub fn flow_equivariance_error<M, P>(m: &M, pot: &P, flow: &FlowConfig, trials: usize, seed: u64) -> Result<f64, TrainError>
where
    M: Symmetric,
    P: Potential<M, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = m.sample_prior(&mut rng)?;
        let g = m.random_g(&mut rng)?;
        let a = integrate(m, pot, &m.act_point(&g, &x), flow)?.endpoint;
        let b = m.act_point(&g, &integrate(m, pot, &x, flow)?.endpoint);
        worst = worst.max(m.distance(&a, &b));
    }
    Ok(worst)
}

/// Largest `|log q(x) − log q(g·x)|`.
pub fn density_invariance_error<M, P>(m: &M, pot: &P, flow: &FlowConfig, trials: usize, seed: u64) -> Result<f64, TrainError>
where
    M: Symmetric,
    P: Potential<M, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let x = m.sample_prior(&mut rng)?;
        let g = m.random_g(&mut rng)?;
        let a = model_log_density(m, pot, &x, flow)?;
        let b = model_log_density(m, pot, &m.act_point(&g, &x), flow)?;
        worst = worst.max((a - b).abs());
    }
    Ok(worst)
}

/// Point reached from `p` along the geodesic with frame velocity `c`.
fn frame_geodesic<M: Manifold>(m: &M, p: &M::Point<f64>, c: &[f64]) -> M::Point<f64> {
    m.act(p, &m.assemble(p, c))
}

fn unit(d: usize, k: usize, h: f64) -> Vec<f64> {
    let mut v = vec![0.0; d];
    v[k] = h;
    v
}

/// Second-central-difference Laplacian `Σ_k [f(γ_k(h)) − 2f + f(γ_k(−h))]/h²`
/// and central-difference gradient along the frame geodesics, both
/// Richardson-extrapolated from steps `h` and `h/2`.
pub fn fd_grad_laplacian<M: Manifold>(
    m: &M,
    f: impl Fn(&M::Point<f64>) -> Result<f64, TrainError>,
    p: &M::Point<f64>,
    h: f64,
) -> Result<(Vec<f64>, f64), TrainError> {
    let f0 = f(p)?;
    let d = m.frame_dim();
    let mut grad = Vec::with_capacity(d);
    let mut lap = 0.0;
    for k in 0..d {
        let mut g = [0.0; 2];
        let mut l = [0.0; 2];
        for (i, s) in [h, 0.5 * h].into_iter().enumerate() {
            let fp = f(&frame_geodesic(m, p, &unit(d, k, s)))?;
            let fm = f(&frame_geodesic(m, p, &unit(d, k, -s)))?;
            g[i] = (fp - fm) / (2.0 * s);
            l[i] = (fp - 2.0 * f0 + fm) / (s * s);
        }
        grad.push((4.0 * g[1] - g[0]) / 3.0);
        lap += (4.0 * l[1] - l[0]) / 3.0;
    }
    Ok((grad, lap))
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / b.abs().max(1e-300)
}

/// Plain evaluation of a network potential on its manifold.
pub trait NetManifold: PriorSampler {
    fn arch(&self) -> Arch;
    fn phi(&self, model: &Model, p: &Self::Point<f64>, t: f64) -> Result<f64, TrainError>;
}

impl NetManifold for SunManifold {
    fn arch(&self) -> Arch {
        Arch::deepset(self.n())
    }

    fn phi(&self, model: &Model, p: &CMatrix<f64>, t: f64) -> Result<f64, TrainError> {
        match model {
            Model::Sun(d) => Ok(phi_sun(d, p, t)?),
            Model::Sphere(_) => Err(crate::flow::FlowError::Mismatch.into()),
        }
    }
}

impl NetManifold for SphereManifold {
    fn arch(&self) -> Arch {
        Arch::zmlp()
    }

    fn phi(&self, model: &Model, p: &[f64; 3], t: f64) -> Result<f64, TrainError> {
        match model {
            Model::Sphere(q) => Ok(phi_sphere(q, p, t)),
            Model::Sun(_) => Err(crate::flow::FlowError::Mismatch.into()),
        }
    }
}

/// Largest relative error of the Taylor-route divergence against
/// [`fd_grad_laplacian`], over random potentials and points.
pub fn divergence_fd_error<M>(m: &M, trials: usize, seed: u64) -> Result<f64, TrainError>
where
    M: NetManifold,
    NetPotential<f64>: Potential<M, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for trial in 0..trials {
        let model = Arc::new(random_params(&m.arch(), seed.wrapping_add(trial as u64)));
        let p = m.sample_prior(&mut rng)?;
        let t: f64 = rng.random_range(0.0..1.0);
        let (_, lap_fd) = fd_grad_laplacian(m, |q| m.phi(&model, q, t), &p, 2e-3)?;
        let (_, lap) = NetPotential::plain(model).grad_div(m, &p, t)?;
        worst = worst.max(rel_err(lap, lap_fd));
    }
    Ok(worst)
}

/// The height function `z` on S², whose Laplacian is `−2z`.
pub struct Height;

impl ScalarField<SphereManifold> for Height {
    fn eval<S: Real>(&self, _: &SphereManifold, p: &[S; 3], _: f64) -> Result<S, crate::flow::FlowError> {
        Ok(p[2])
    }
}

/// Largest relative error of `Δz = −2z` at random points.
pub fn sphere_harmonic_error(points: usize, seed: u64) -> Result<f64, TrainError> {
    let m = SphereManifold::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..points {
        let p = m.sample_prior(&mut rng)?;
        let (_, lap) = Sweep(Height).grad_div(&m, &p, 0.0)?;
        worst = worst.max(rel_err(lap, -2.0 * p[2]));
    }
    Ok(worst)
}

/// Absolute value of the determinant by partial-pivot elimination.
fn abs_det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut det = 1.0;
    for c in 0..n {
        let piv = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).expect("non-empty");
        a.swap(c, piv);
        let d = a[c][c];
        if d == 0.0 {
            return 0.0;
        }
        det *= d;
        for r in c + 1..n {
            let f = a[r][c] / d;
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    det.abs()
}

/// `(log|det DF| by central differences in frame coordinates, −Δlog)` for
/// the forward flow from `u`; the two agree when the divergence
/// bookkeeping is right.
pub fn volume_transport<M, P>(m: &M, pot: &P, u: &M::Point<f64>, flow: &FlowConfig, h: f64) -> Result<(f64, f64), TrainError>
where
    M: Symmetric,
    P: Potential<M, f64>,
{
    let base = integrate(m, pot, u, flow)?;
    let d = m.frame_dim();
    let frame: Vec<M::Point<f64>> = (0..d).map(|j| m.ambient(&base.endpoint, &unit(d, j, 1.0))).collect();
    let mut jac = vec![vec![0.0; d]; d];
    for k in 0..d {
        let fp = integrate(m, pot, &frame_geodesic(m, u, &unit(d, k, h)), flow)?.endpoint;
        let fm = integrate(m, pot, &frame_geodesic(m, u, &unit(d, k, -h)), flow)?.endpoint;
        let dv = m.diff(&fp, &fm);
        for (j, e) in frame.iter().enumerate() {
            jac[j][k] = m.inner(e, &dv) / (2.0 * h);
        }
    }
    Ok((abs_det(jac).ln(), -base.delta_log))
}

/// Largest `|log|det DF| + Δlog|` over random starting points.
pub fn volume_transport_error<M, P>(m: &M, pot: &P, flow: &FlowConfig, trials: usize, seed: u64) -> Result<f64, TrainError>
where
    M: Symmetric,
    P: Potential<M, f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..trials {
        let u = m.sample_prior(&mut rng)?;
        let (fd, acc) = volume_transport(m, pot, &u, flow, 1e-4)?;
        worst = worst.max((fd - acc).abs());
    }
    Ok(worst)
}

/// Total mass of the model density by Weyl quadrature (SU(n)) or by the
/// interval reduction (S²).
pub fn model_mass(model: &Arc<Model>, resolution: usize, flow: &FlowConfig) -> Result<f64, TrainError> {
    match model.as_ref() {
        Model::Sun(_) => weyl_mass(model, resolution, flow),
        Model::Sphere(_) => {
            let rows = interval_density(model, resolution, flow)?;
            let (zs, ds): (Vec<f64>, Vec<f64>) = rows.into_iter().unzip();
            Ok(trapezoid(&zs, &ds))
        }
    }
}

/// Central finite differences of a loss on `coords`, compared with the
/// analytic gradient: largest relative error.
fn fd_gradient_error(
    model: &Model,
    analytic: &[f64],
    coords: &[usize],
    h: f64,
    loss: impl Fn(&Arc<Model>) -> Result<f64, TrainError>,
) -> Result<f64, TrainError> {
    let flat = model.to_flat();
    let mut worst: f64 = 0.0;
    for &i in coords {
        let eval = |delta: f64| -> Result<f64, TrainError> {
            let mut x = flat.clone();
            x[i] += delta;
            let mut mm = model.clone();
            mm.set_flat(&x)?;
            loss(&Arc::new(mm))
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        worst = worst.max((fd - analytic[i]).abs() / fd.abs().max(analytic[i].abs()).max(1e-12));
    }
    Ok(worst)
}

/// Coordinates with the largest gradient magnitudes plus a seeded random
/// selection.
fn pick_coords(grads: &[f64], largest: usize, random: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..grads.len()).collect();
    idx.sort_by(|&a, &b| grads[b].abs().total_cmp(&grads[a].abs()));
    let mut out: Vec<usize> = idx[..largest.min(idx.len())].to_vec();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while out.len() < largest + random && out.len() < grads.len() {
        let i = rng.random_range(0..grads.len());
        if !out.contains(&i) && grads[i].abs() > 1e-8 {
            out.push(i);
        }
    }
    out
}

/// Reverse-KL loss gradient on SU(2) (toy set 3) against central
/// differences: `(worst relative error, coordinates checked)`.
pub fn reverse_kl_gradient_error(seed: u64) -> Result<(f64, usize), TrainError> {
    let m = SunManifold::new(2)?;
    let model = Arc::new(random_params(&Arch::deepset(2), seed));
    let target = ToyCoeffs::set(3, 2)?;
    let flow = FlowConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pts: Vec<(CMatrix<f64>, f64)> = (0..4).map(|_| Ok((m.sample_prior(&mut rng)?, 1.0))).collect::<Result<_, TrainError>>()?;
    let out = reverse_kl_weighted(&m, &model, &target, &pts, &flow)?;
    let coords = pick_coords(&out.grads, 8, 4, seed);
    let err = fd_gradient_error(&model, &out.grads, &coords, 1e-5, |mm| reverse_kl_loss(&m, mm, &target, &pts, &flow))?;
    Ok((err, coords.len()))
}

/// NLL loss gradient on S² (band samples) against central differences.
pub fn nll_gradient_error(seed: u64) -> Result<(f64, usize), TrainError> {
    let m = SphereManifold::new();
    let model = Arc::new(random_params(&Arch::zmlp(), seed));
    let flow = FlowConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bt = BandTarget::default();
    let data: Vec<[f64; 3]> = (0..6).map(|_| Ok(band_sample(&bt, &mut rng)?.coords())).collect::<Result<_, TrainError>>()?;
    let out = nll_step(&m, &model, &data, &flow)?;
    let coords = pick_coords(&out.grads, 8, 4, seed);
    let err = fd_gradient_error(&model, &out.grads, &coords, 1e-5, |mm| nll_loss(&m, mm, &data, &flow))?;
    Ok((err, coords.len()))
}

/// Eigen-angle histogram of SU(2) Haar samples on `[0, π]` against the
/// marginal `(2/π)sin²θ` (L1 of bin masses), and the L1 distance between
/// histograms of `U` and `gU` for independent draws.
pub fn haar_su2_l1(samples: usize, bins: usize, seed: u64) -> Result<(f64, f64), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = haar_sample(2, &mut rng)?;
    let bin_of = |u: &SpecialUnitary| -> Result<usize, TrainError> {
        let th = eigen_angles(u)?.as_slice()[1].abs();
        Ok(((th / PI * bins as f64) as usize).min(bins - 1))
    };
    let (mut h1, mut h2) = (vec![0.0; bins], vec![0.0; bins]);
    for _ in 0..samples {
        h1[bin_of(&haar_sample(2, &mut rng)?)?] += 1.0 / samples as f64;
        h2[bin_of(&g.mul(&haar_sample(2, &mut rng)?))?] += 1.0 / samples as f64;
    }
    let cdf = |t: f64| (t - t.sin() * t.cos()) / PI;
    let w = PI / bins as f64;
    let marginal: f64 = (0..bins).map(|b| (h1[b] - (cdf((b + 1) as f64 * w) - cdf(b as f64 * w))).abs()).sum();
    let two_sample: f64 = h1.iter().zip(&h2).map(|(a, b)| (a - b).abs()).sum();
    Ok((marginal, two_sample))
}

/// Largest characteristic-polynomial residual of the closed-form angles.
pub fn eigen_residual(n: usize, samples: usize, seed: u64) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let u = haar_sample(n, &mut rng)?;
        worst = worst.max(char_poly_residual(u.matrix(), eigen_angles(&u)?.as_slice()));
    }
    Ok(worst)
}

/// Which property suite to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Theorems,
    Numerics,
    Haar,
}

impl std::str::FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "theorems" => Ok(Suite::Theorems),
            "numerics" => Ok(Suite::Numerics),
            "haar" => Ok(Suite::Haar),
            _ => Err(format!("unknown suite {s:?} (theorems, numerics, haar)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckResult {
    pub name: String,
    pub value: f64,
    pub tolerance: f64,
}

impl CheckResult {
    pub fn new(name: impl Into<String>, value: f64, tolerance: f64) -> Self {
        Self { name: name.into(), value, tolerance }
    }

    pub fn passed(&self) -> bool {
        self.value.is_finite() && self.value <= self.tolerance
    }
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed() { "PASS" } else { "FAIL" };
        write!(f, "{status}  {:<44} {:>12.3e}  (tol {:.0e})", self.name, self.value, self.tolerance)
    }
}

/// Models under test: the SU(2), SU(3) and S² potentials.
pub struct Models {
    pub su2: Arc<Model>,
    pub su3: Arc<Model>,
    pub sphere: Arc<Model>,
}

impl Models {
    pub fn random(seed: u64) -> Self {
        Self {
            su2: Arc::new(random_params(&Arch::deepset(2), seed)),
            su3: Arc::new(random_params(&Arch::deepset(3), seed + 1)),
            sphere: Arc::new(random_params(&Arch::zmlp(), seed + 2)),
        }
    }
}

/// The three equivariance properties on every manifold.
pub fn theorem_suite(models: &Models, seed: u64) -> Result<Vec<CheckResult>, TrainError> {
    let flow = FlowConfig::default();
    let (su2, su3, s2) = (SunManifold::new(2)?, SunManifold::new(3)?, SphereManifold::new());
    let (p2, p3, ps) =
        (NetPotential::plain(models.su2.clone()), NetPotential::plain(models.su3.clone()), NetPotential::plain(models.sphere.clone()));
    Ok(vec![
        CheckResult::new("gradient equivariance S2", gradient_equivariance_error(&s2, &ps, 100, seed)?, 1e-8),
        CheckResult::new("gradient equivariance SU(2)", gradient_equivariance_error(&su2, &p2, 100, seed)?, 1e-8),
        CheckResult::new("gradient equivariance SU(3)", gradient_equivariance_error(&su3, &p3, 100, seed)?, 1e-8),
        CheckResult::new("flow equivariance S2", flow_equivariance_error(&s2, &ps, &flow, 50, seed)?, 1e-6),
        CheckResult::new("flow equivariance SU(2)", flow_equivariance_error(&su2, &p2, &flow, 50, seed)?, 1e-6),
        CheckResult::new("flow equivariance SU(3)", flow_equivariance_error(&su3, &p3, &flow, 50, seed)?, 1e-6),
        CheckResult::new("density invariance S2", density_invariance_error(&s2, &ps, &flow, 50, seed)?, 1e-5),
        CheckResult::new("density invariance SU(2)", density_invariance_error(&su2, &p2, &flow, 50, seed)?, 1e-5),
        CheckResult::new("density invariance SU(3)", density_invariance_error(&su3, &p3, &flow, 50, seed)?, 1e-5),
    ])
}

/// Derivative, divergence, volume and gradient checks against finite
/// differences and quadrature.
pub fn numerics_suite(seed: u64) -> Result<Vec<CheckResult>, TrainError> {
    let flow = FlowConfig::default();
    let (su2, su3, s2) = (SunManifold::new(2)?, SunManifold::new(3)?, SphereManifold::new());
    let models = Models::random(seed);
    let mut out = vec![
        CheckResult::new("laplacian vs FD S2", divergence_fd_error(&s2, 34, seed)?, 1e-5),
        CheckResult::new("laplacian vs FD SU(2)", divergence_fd_error(&su2, 33, seed)?, 1e-5),
        CheckResult::new("laplacian vs FD SU(3)", divergence_fd_error(&su3, 33, seed)?, 1e-5),
        CheckResult::new("sphere harmonic dz = -2z", sphere_harmonic_error(20, seed)?, 1e-4),
        CheckResult::new(
            "volume transport S2",
            volume_transport_error(&s2, &NetPotential::plain(models.sphere.clone()), &flow, 4, seed)?,
            2e-3,
        ),
        CheckResult::new(
            "volume transport SU(2)",
            volume_transport_error(&su2, &NetPotential::plain(models.su2.clone()), &flow, 3, seed)?,
            2e-3,
        ),
        CheckResult::new(
            "volume transport SU(3)",
            volume_transport_error(&su3, &NetPotential::plain(models.su3.clone()), &flow, 3, seed)?,
            2e-3,
        ),
        CheckResult::new("model mass S2", (model_mass(&models.sphere, 2001, &flow)? - 1.0).abs(), 1e-2),
        CheckResult::new("model mass SU(2)", (model_mass(&models.su2, 512, &flow)? - 1.0).abs(), 1e-2),
        CheckResult::new("model mass SU(3)", (model_mass(&models.su3, 64, &flow)? - 1.0).abs(), 1e-2),
    ];
    out.push(CheckResult::new("reverse-KL gradient vs FD", reverse_kl_gradient_error(seed)?.0, 1e-4));
    out.push(CheckResult::new("NLL gradient vs FD", nll_gradient_error(seed)?.0, 1e-4));
    out.push(CheckResult::new("char-poly residual SU(2)", eigen_residual(2, 1000, seed)?, 1e-8));
    out.push(CheckResult::new("char-poly residual SU(3)", eigen_residual(3, 1000, seed)?, 1e-8));
    Ok(out)
}

/// Haar sampler marginal and left invariance.
pub fn haar_suite(seed: u64) -> Result<Vec<CheckResult>, TrainError> {
    let (marginal, two_sample) = haar_su2_l1(100_000, 50, seed)?;
    Ok(vec![
        CheckResult::new("SU(2) angle histogram L1", marginal, 0.02),
        CheckResult::new("left invariance two-sample L1", two_sample, 0.03),
    ])
}

pub fn run_suite(suite: Suite, models: &Models, seed: u64) -> Result<Vec<CheckResult>, TrainError> {
    match suite {
        Suite::Theorems => theorem_suite(models, seed),
        Suite::Numerics => numerics_suite(seed),
        Suite::Haar => haar_suite(seed),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    struct ReEntry(usize, usize);

    impl ScalarField<SunManifold> for ReEntry {
        fn eval<S: Real>(&self, _: &SunManifold, p: &CMatrix<S>, _: f64) -> Result<S, crate::flow::FlowError> {
            Ok(p[(self.0, self.1)].re)
        }
    }

    #[test]
    fn non_invariant_probe_fails() {
        let m = SunManifold::new(2).unwrap();
        // Re U₀₀ = Re tr U / 2 on SU(2).
        assert!(gradient_equivariance_error(&m, &Sweep(ReEntry(0, 1)), 20, 1).unwrap() > 1e-3);
        assert!(gradient_equivariance_error(&m, &Sweep(ReEntry(0, 0)), 20, 1).unwrap() <= 1e-8);
        let m3 = SunManifold::new(3).unwrap();
        assert!(gradient_equivariance_error(&m3, &Sweep(ReEntry(0, 0)), 20, 1).unwrap() > 1e-3);
        let p = NetPotential::plain(Models::random(1).su2);
        assert!(gradient_equivariance_error(&m, &p, 20, 1).unwrap() <= 1e-8);
    }

    #[test]
    fn determinant() {
        assert!((abs_det(vec![vec![2.0, 1.0], vec![1.0, 3.0]]) - 5.0).abs() < 1e-14);
        assert!((abs_det(vec![vec![0.0, 2.0], vec![3.0, 0.0]]) - 6.0).abs() < 1e-14);
    }

    #[test]
    fn identity_volume_transport() {
        let m = SphereManifold::new();
        let model = Arc::new(crate::potentials::init_params(&Arch::zmlp(), 0));
        let p = m.sample_prior(&mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let (fd, acc) = volume_transport(&m, &NetPotential::plain(model), &p, &FlowConfig::default(), 1e-4).unwrap();
        assert!(fd.abs() < 1e-8 && acc == 0.0);
    }
}
