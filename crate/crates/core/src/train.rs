//! Reverse-KL and maximum-likelihood training with Adam.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::sync::Arc;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::diff::{Real, Tape, Var};
use crate::flow::{
    model_log_density, push_sample, FlowConfig, FlowError, Manifold, NetPotential, Potential, SphereManifold,
    SunManifold,
};
use crate::potentials::{register_params, Arch, Model, ParamError};
use crate::sphere::{uniform_sample, SpherePoint};
use crate::sun::{angle_jets, haar_sample, SunError};
use crate::targets::{band_log_density_z, band_sample, BandTarget, TargetError, ToyCoeffs};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;
/// Largest fraction of a batch that may be dropped before a step fails.
pub const MAX_DROP_FRACTION: f64 = 0.1;
pub const MAX_RETRIES: usize = 3;
pub const SMOOTHING_WINDOW: usize = 20;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Target(#[from] TargetError),
    #[error(transparent)]
    Params(#[from] ParamError),
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error("{dropped} of {batch} samples diverged")]
    TooManyDropped { dropped: usize, batch: usize },
    #[error("non-finite gradient")]
    NonFiniteGradient,
}

impl From<SunError> for TrainError {
    fn from(e: SunError) -> Self {
        TrainError::Flow(e.into())
    }
}

impl TrainError {
    fn is_retryable(&self) -> bool {
        matches!(self, TrainError::TooManyDropped { .. })
    }
}

/// Numerical failures that drop a single sample instead of the whole step.
fn is_droppable(e: &FlowError) -> bool {
    matches!(e, FlowError::Diverged { .. } | FlowError::Sun(SunError::EigenFallback(_)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Paradigm {
    ReverseKl,
    Nll,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub paradigm: Paradigm,
    pub batch: usize,
    pub iterations: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub lr_milestones: Vec<usize>,
    pub lr_factor: f64,
    pub seed: u64,
    pub flow: FlowConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            paradigm: Paradigm::ReverseKl,
            batch: 512,
            iterations: 300,
            lr: 0.01,
            weight_decay: 0.01,
            lr_milestones: vec![100, 200],
            lr_factor: 0.1,
            seed: 0,
            flow: FlowConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if self.batch == 0 {
            return Err(TrainError::Config("batch must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(TrainError::Config(format!("lr = {} (need > 0)", self.lr)));
        }
        if !(self.weight_decay >= 0.0) || !(self.lr_factor > 0.0) {
            return Err(TrainError::Config("weight decay and lr factor must be non-negative / positive".into()));
        }
        if self.lr_milestones.windows(2).any(|w| w[0] >= w[1]) {
            return Err(TrainError::Config(format!("milestones {:?} not strictly increasing", self.lr_milestones)));
        }
        self.flow.validate()?;
        Ok(())
    }

    /// Learning rate in effect at iteration `iter`.
    pub fn lr_at(&self, iter: usize) -> f64 {
        let k = self.lr_milestones.iter().filter(|&&m| m <= iter).count();
        self.lr * self.lr_factor.powi(k as i32)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }
}

/// Bias-corrected Adam step followed by decoupled weight decay. A
/// non-finite gradient leaves state and parameters untouched.
pub fn adam_update(state: &mut AdamState, params: &mut [f64], grads: &[f64], lr: f64, weight_decay: f64) -> Result<(), TrainError> {
    if params.len() != grads.len() || state.m.len() != params.len() {
        return Err(TrainError::Config(format!(
            "shape mismatch: {} parameters, {} gradients, {} moments",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(TrainError::NonFiniteGradient);
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    let decay = 1.0 - lr * weight_decay;
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = ADAM_BETA1 * state.m[i] + (1.0 - ADAM_BETA1) * g;
        state.v[i] = ADAM_BETA2 * state.v[i] + (1.0 - ADAM_BETA2) * g * g;
        let mh = state.m[i] / c1;
        let vh = state.v[i] / c2;
        params[i] -= lr * mh / (vh.sqrt() + ADAM_EPS);
        params[i] *= decay;
    }
    Ok(())
}

/// Draws from the uniform prior of a manifold.
pub trait PriorSampler: Manifold {
    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<Self::Point<f64>, TrainError>;
}

impl PriorSampler for SunManifold {
    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<CMatrix, TrainError> {
        Ok(haar_sample(self.n(), rng)?.matrix().clone())
    }
}

type CMatrix = crate::linalg::CMatrix<f64>;

impl PriorSampler for SphereManifold {
    fn sample_prior<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<[f64; 3], TrainError> {
        Ok(uniform_sample(rng).coords())
    }
}

/// Unnormalized target log density usable on any carrier.
pub trait LogTarget<M: Manifold> {
    fn log_density<S: Real>(&self, m: &M, x: &M::Point<S>) -> Result<S, TrainError>;
}

impl LogTarget<SunManifold> for ToyCoeffs {
    fn log_density<S: Real>(&self, m: &SunManifold, x: &crate::linalg::CMatrix<S>) -> Result<S, TrainError> {
        if m.n() != self.n {
            return Err(TrainError::Config(format!("target is for SU({}), manifold is SU({})", self.n, m.n())));
        }
        let theta = angle_jets(x, &[], &[])?.theta;
        Ok(crate::targets::toy_log_density_unnorm(self, &theta))
    }
}

impl LogTarget<SphereManifold> for BandTarget {
    fn log_density<S: Real>(&self, _: &SphereManifold, x: &[S; 3]) -> Result<S, TrainError> {
        Ok(band_log_density_z(self, x[2]))
    }
}

/// The prior itself as a target.
#[derive(Debug, Clone, Copy, Default)]
pub struct PriorTarget;

impl<M: Manifold> LogTarget<M> for PriorTarget {
    fn log_density<S: Real>(&self, m: &M, _: &M::Point<S>) -> Result<S, TrainError> {
        Ok(S::cst(m.prior_log_density()))
    }
}

/// Mean loss and its parameter gradient over the kept samples of a batch.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub loss: f64,
    pub grads: Vec<f64>,
    pub dropped: usize,
}

impl StepOutput {
    pub fn grad_norm(&self) -> f64 {
        self.grads.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Accumulates weighted per-sample losses and gradients over one tape that
/// is cleared between samples.
struct Accumulator {
    tape: Tape,
    grads: Vec<f64>,
    loss: f64,
    weight: f64,
    dropped: usize,
    total: usize,
}

impl Accumulator {
    fn new(params: usize) -> Self {
        Self { tape: Tape::with_capacity(1 << 16), grads: vec![0.0; params], loss: 0.0, weight: 0.0, dropped: 0, total: 0 }
    }

    fn add<F>(&mut self, w: f64, f: F) -> Result<(), TrainError>
    where
        F: for<'t> FnOnce(&'t Tape) -> Result<(Var<'t>, usize), FlowError>,
    {
        self.total += 1;
        self.tape.clear();
        let outcome = f(&self.tape);
        match outcome {
            Ok((l, base)) if l.value().is_finite() => {
                let g = self.tape.backward(l);
                let n = self.grads.len();
                for (acc, gi) in self.grads.iter_mut().zip(g.range(base, n)) {
                    *acc += w * gi;
                }
                self.loss += w * l.value();
                self.weight += w;
                Ok(())
            }
            Ok(_) => {
                self.dropped += 1;
                Ok(())
            }
            Err(e) if is_droppable(&e) => {
                self.dropped += 1;
                Ok(())
            }
            Err(e) => Err(e.into()),
        }
    }

    fn finish(mut self) -> Result<StepOutput, TrainError> {
        if self.weight <= 0.0 || self.dropped as f64 > MAX_DROP_FRACTION * self.total as f64 {
            return Err(TrainError::TooManyDropped { dropped: self.dropped, batch: self.total });
        }
        for g in &mut self.grads {
            *g /= self.weight;
        }
        Ok(StepOutput { loss: self.loss / self.weight, grads: self.grads, dropped: self.dropped })
    }
}

/// Reverse-KL loss `Σ wᵢ [log q(xᵢ) − log p̃(xᵢ)] / Σ wᵢ` with `xᵢ` pushed
/// forward from the given prior points, and its parameter gradient.
pub fn reverse_kl_weighted<M, T>(
    m: &M,
    model: &Arc<Model>,
    target: &T,
    prior_points: &[(M::Point<f64>, f64)],
    flow: &FlowConfig,
) -> Result<StepOutput, TrainError>
where
    M: Manifold,
    T: LogTarget<M>,
    for<'t> NetPotential<Var<'t>>: Potential<M, Var<'t>>,
{
    let mut acc = Accumulator::new(model.len());
    for (u, w) in prior_points {
        let mut target_err = None;
        acc.add(*w, |tape| {
            let (leaves, _) = register_params(tape, model);
            let pot = NetPotential { model: Arc::clone(model), binding: leaves };
            let (x, log_q) = push_sample(m, &pot, &m.lift::<Var>(u), flow)?;
            match target.log_density(m, &x) {
                Ok(lp) => Ok((log_q - lp, leaves.base)),
                Err(e) => {
                    target_err = Some(e);
                    Ok((Var::constant(f64::NAN), leaves.base))
                }
            }
        })?;
        if let Some(e) = target_err {
            if !matches!(&e, TrainError::Flow(f) if is_droppable(f)) {
                return Err(e);
            }
        }
    }
    acc.finish()
}

/// Reverse-KL step on a fresh batch of prior draws.
pub fn reverse_kl_step<M, T, R>(
    m: &M,
    model: &Arc<Model>,
    target: &T,
    batch: usize,
    rng: &mut R,
    flow: &FlowConfig,
) -> Result<StepOutput, TrainError>
where
    M: PriorSampler,
    T: LogTarget<M>,
    R: Rng + ?Sized,
    for<'t> NetPotential<Var<'t>>: Potential<M, Var<'t>>,
{
    let pts = (0..batch).map(|_| Ok((m.sample_prior(rng)?, 1.0))).collect::<Result<Vec<_>, TrainError>>()?;
    reverse_kl_weighted(m, model, target, &pts, flow)
}

/// Negative log-likelihood `−mean log q(xᵢ)` of a data batch and its
/// parameter gradient.
pub fn nll_step<M>(m: &M, model: &Arc<Model>, data: &[M::Point<f64>], flow: &FlowConfig) -> Result<StepOutput, TrainError>
where
    M: Manifold,
    for<'t> NetPotential<Var<'t>>: Potential<M, Var<'t>>,
{
    if data.is_empty() {
        return Err(TrainError::Config("empty data batch".into()));
    }
    let mut acc = Accumulator::new(model.len());
    for x in data {
        acc.add(1.0, |tape| {
            let (leaves, _) = register_params(tape, model);
            let pot = NetPotential { model: Arc::clone(model), binding: leaves };
            let lq = model_log_density(m, &pot, &m.lift::<Var>(x), flow)?;
            Ok((-lq, leaves.base))
        })?;
    }
    acc.finish()
}

/// Plain-float reverse-KL loss over fixed prior points.
pub fn reverse_kl_loss<M, T>(
    m: &M,
    model: &Arc<Model>,
    target: &T,
    prior_points: &[(M::Point<f64>, f64)],
    flow: &FlowConfig,
) -> Result<f64, TrainError>
where
    M: Manifold,
    T: LogTarget<M>,
    NetPotential<f64>: Potential<M, f64>,
{
    let pot = NetPotential::plain(Arc::clone(model));
    let (mut acc, mut wsum) = (0.0, 0.0);
    for (u, w) in prior_points {
        let (x, lq) = push_sample(m, &pot, u, flow)?;
        acc += w * (lq - target.log_density(m, &x)?);
        wsum += w;
    }
    Ok(acc / wsum)
}

/// Plain-float negative log-likelihood of a data batch.
pub fn nll_loss<M>(m: &M, model: &Arc<Model>, data: &[M::Point<f64>], flow: &FlowConfig) -> Result<f64, TrainError>
where
    M: Manifold,
    NetPotential<f64>: Potential<M, f64>,
{
    let pot = NetPotential::plain(Arc::clone(model));
    let mut acc = 0.0;
    for x in data {
        acc -= model_log_density(m, &pot, x, flow)?;
    }
    Ok(acc / data.len() as f64)
}

/// What to learn.
#[derive(Debug, Clone)]
pub enum Problem {
    /// Conjugation-invariant toy density on SU(n).
    Toy(ToyCoeffs),
    /// Band density on S²; fresh exact samples each iteration under NLL.
    Band(BandTarget),
    /// Fixed point cloud on S², NLL only, shuffled each epoch.
    Data(Vec<SpherePoint>),
}

impl Problem {
    pub fn arch(&self) -> Arch {
        match self {
            Problem::Toy(c) => Arch::deepset(c.n),
            _ => Arch::zmlp(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricRow {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
    pub seconds: f64,
}

pub const METRICS_HEADER: &str = "iter,loss,grad_norm,lr,seconds";

pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    s.push('\n');
    for r in rows {
        let _ = writeln!(s, "{},{},{},{},{:.3}", r.iter, r.loss, r.grad_norm, r.lr, r.seconds);
    }
    s
}

/// Trailing mean of the last [`SMOOTHING_WINDOW`] losses, per iteration.
pub fn smoothed_losses(rows: &[MetricRow]) -> Vec<f64> {
    let mut win: VecDeque<f64> = VecDeque::with_capacity(SMOOTHING_WINDOW);
    rows.iter()
        .map(|r| {
            if win.len() == SMOOTHING_WINDOW {
                win.pop_front();
            }
            win.push_back(r.loss);
            win.iter().sum::<f64>() / win.len() as f64
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    pub final_model: Model,
    /// Parameters at which the lowest smoothed loss was measured.
    pub best_model: Model,
    pub best_smoothed_loss: Option<f64>,
    pub metrics: Vec<MetricRow>,
    pub warnings: Vec<String>,
    /// Set when training stopped early; the models hold the partial state.
    pub aborted: Option<String>,
}

/// Run the configured paradigm from `init`, calling `on_iter` after every
/// completed iteration.
pub fn train(
    cfg: &TrainConfig,
    problem: &Problem,
    init: Model,
    mut on_iter: impl FnMut(&MetricRow),
) -> Result<TrainReport, TrainError> {
    cfg.validate()?;
    if init.arch() != problem.arch() {
        return Err(TrainError::Config(format!(
            "model {} {} does not fit the problem",
            init.arch().manifold(),
            init.arch().descriptor()
        )));
    }
    let flow = cfg.flow;
    let batch = cfg.batch;
    match (problem, cfg.paradigm) {
        (Problem::Toy(c), Paradigm::ReverseKl) => {
            let m = SunManifold::new(c.n)?;
            run(cfg, init, &mut on_iter, |model, rng| reverse_kl_step(&m, model, c, batch, rng, &flow))
        }
        (Problem::Band(bt), Paradigm::ReverseKl) => {
            let m = SphereManifold::new();
            run(cfg, init, &mut on_iter, |model, rng| reverse_kl_step(&m, model, bt, batch, rng, &flow))
        }
        (Problem::Band(bt), Paradigm::Nll) => {
            let m = SphereManifold::new();
            run(cfg, init, &mut on_iter, |model, rng| {
                let pts = (0..batch).map(|_| Ok(band_sample(bt, rng)?.coords())).collect::<Result<Vec<_>, TrainError>>()?;
                nll_step(&m, model, &pts, &flow)
            })
        }
        (Problem::Data(points), Paradigm::Nll) => {
            if points.is_empty() {
                return Err(TrainError::Config("empty dataset".into()));
            }
            let m = SphereManifold::new();
            let mut order: Vec<usize> = Vec::new();
            run(cfg, init, &mut on_iter, |model, rng| {
                let mut pts = Vec::with_capacity(batch);
                while pts.len() < batch {
                    if order.is_empty() {
                        order = (0..points.len()).collect();
                        order.shuffle(rng);
                    }
                    pts.push(points[order.pop().expect("non-empty")].coords());
                }
                nll_step(&m, model, &pts, &flow)
            })
        }
        (Problem::Toy(_), Paradigm::Nll) => Err(TrainError::Config("no sampler for the toy target; use reverse_kl".into())),
        (Problem::Data(_), Paradigm::ReverseKl) => Err(TrainError::Config("a dataset has no density; use nll".into())),
    }
}

fn run(
    cfg: &TrainConfig,
    init: Model,
    on_iter: &mut dyn FnMut(&MetricRow),
    mut step: impl FnMut(&Arc<Model>, &mut ChaCha8Rng) -> Result<StepOutput, TrainError>,
) -> Result<TrainReport, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = init.to_flat();
    let mut model = Arc::new(init);
    let mut adam = AdamState::new(params.len());
    let mut report = TrainReport {
        final_model: (*model).clone(),
        best_model: (*model).clone(),
        best_smoothed_loss: None,
        metrics: Vec::with_capacity(cfg.iterations),
        warnings: Vec::new(),
        aborted: None,
    };
    let mut window: VecDeque<f64> = VecDeque::with_capacity(SMOOTHING_WINDOW);
    let start = Instant::now();
    'outer: for iter in 0..cfg.iterations {
        let lr = cfg.lr_at(iter);
        let mut failures = 0;
        let out = loop {
            match step(&model, &mut rng) {
                Ok(o) => break o,
                Err(e) if e.is_retryable() && failures < MAX_RETRIES => {
                    failures += 1;
                    report.warnings.push(format!("iteration {iter}: {e}; retry {failures}"));
                }
                Err(e) if e.is_retryable() => {
                    report.aborted = Some(format!("iteration {iter}: {e} after {MAX_RETRIES} retries"));
                    break 'outer;
                }
                Err(e) => return Err(e),
            }
        };
        if out.dropped > 0 {
            report.warnings.push(format!("iteration {iter}: dropped {} diverged samples", out.dropped));
        }
        if window.len() == SMOOTHING_WINDOW {
            window.pop_front();
        }
        window.push_back(out.loss);
        let smoothed = window.iter().sum::<f64>() / window.len() as f64;
        if report.best_smoothed_loss.is_none_or(|b| smoothed < b) {
            report.best_smoothed_loss = Some(smoothed);
            report.best_model = (*model).clone();
        }
        match adam_update(&mut adam, &mut params, &out.grads, lr, cfg.weight_decay) {
            Ok(()) => {
                Arc::make_mut(&mut model).set_flat(&params)?;
            }
            Err(TrainError::NonFiniteGradient) => {
                report.warnings.push(format!("iteration {iter}: non-finite gradient, step skipped"));
            }
            Err(e) => return Err(e),
        }
        let row = MetricRow { iter, loss: out.loss, grad_norm: out.grad_norm(), lr, seconds: start.elapsed().as_secs_f64() };
        on_iter(&row);
        report.metrics.push(row);
    }
    report.final_model = (*model).clone();
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::init_params;
    use crate::sun::{diagonal, weyl_grid};

    #[test]
    fn adam_examples() {
        let mut st = AdamState::new(2);
        let mut p = vec![1.0, -2.0];
        adam_update(&mut st, &mut p, &[0.0, 0.0], 0.01, 0.0).unwrap();
        assert_eq!(p, vec![1.0, -2.0]);
        let mut st = AdamState::new(1);
        let mut p = vec![0.5];
        adam_update(&mut st, &mut p, &[1.0], 0.01, 0.0).unwrap();
        assert!((p[0] - (0.5 - 0.01 / (1.0 + 1e-8))).abs() < 1e-15);
        let before = (st.clone(), p.clone());
        assert!(matches!(adam_update(&mut st, &mut p, &[f64::NAN], 0.01, 0.0), Err(TrainError::NonFiniteGradient)));
        assert_eq!((st, p), before);
    }

    #[test]
    fn adam_matches_reference() {
        let grads: Vec<Vec<f64>> = (0..10).map(|k| vec![(k as f64 * 0.7).sin(), 1.0 / (k as f64 + 1.0), -0.3]).collect();
        let mut st = AdamState::new(3);
        let mut p = vec![0.1, 0.2, -0.4];
        let (mut m, mut v, mut q) = ([0.0; 3], [0.0; 3], [0.1, 0.2, -0.4]);
        for (k, g) in grads.iter().enumerate() {
            adam_update(&mut st, &mut p, g, 0.05, 0.01).unwrap();
            for i in 0..3 {
                m[i] = 0.9 * m[i] + 0.1 * g[i];
                v[i] = 0.999 * v[i] + 0.001 * g[i] * g[i];
                let mh = m[i] / (1.0 - 0.9f64.powi(k as i32 + 1));
                let vh = v[i] / (1.0 - 0.999f64.powi(k as i32 + 1));
                q[i] = (q[i] - 0.05 * mh / (vh.sqrt() + 1e-8)) * (1.0 - 0.05 * 0.01);
            }
        }
        for i in 0..3 {
            assert!((p[i] - q[i]).abs() <= 1e-12);
        }
    }

    #[test]
    fn lr_schedule_and_validation() {
        let cfg = TrainConfig::default();
        assert_eq!(cfg.lr_at(0), 0.01);
        assert!((cfg.lr_at(100) - 0.001).abs() < 1e-18);
        assert!((cfg.lr_at(250) - 0.0001).abs() < 1e-18);
        assert!(TrainConfig { lr_milestones: vec![5, 5], ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { batch: 0, ..cfg.clone() }.validate().is_err());
        assert!(TrainConfig { lr: 0.0, ..cfg }.validate().is_err());
    }

    #[test]
    fn prior_target_identity_flow() {
        let model = Arc::new(init_params(&Arch::deepset(2), 3));
        let m = SunManifold::new(2).unwrap();
        let flow = FlowConfig::default();
        // Weyl-grid prior points make the batch mean an exact Haar average.
        let pts: Vec<(CMatrix, f64)> = weyl_grid(2, 64).unwrap().iter().map(|(a, w)| (diagonal(a), *w)).collect();
        let out = reverse_kl_weighted(&m, &model, &PriorTarget, &pts, &flow).unwrap();
        assert!(out.loss.abs() <= 1e-10);
        assert!(out.grad_norm() <= 1e-8, "{}", out.grad_norm());
    }

    #[test]
    fn target_constant_only_shifts_loss() {
        struct Shift(ToyCoeffs, f64);
        impl LogTarget<SunManifold> for Shift {
            fn log_density<S: Real>(&self, m: &SunManifold, x: &crate::linalg::CMatrix<S>) -> Result<S, TrainError> {
                Ok(self.0.log_density(m, x)? + self.1)
            }
        }
        let mut model = init_params(&Arch::deepset(2), 5);
        let mut flat = model.to_flat();
        let mut r = ChaCha8Rng::seed_from_u64(9);
        for x in flat.iter_mut() {
            *x += r.random_range(-0.1..0.1);
        }
        model.set_flat(&flat).unwrap();
        let model = Arc::new(model);
        let m = SunManifold::new(2).unwrap();
        let c = ToyCoeffs::set(3, 2).unwrap();
        let flow = FlowConfig::default();
        let a = reverse_kl_step(&m, &model, &c, 8, &mut ChaCha8Rng::seed_from_u64(1), &flow).unwrap();
        let b = reverse_kl_step(&m, &model, &Shift(c, 2.5), 8, &mut ChaCha8Rng::seed_from_u64(1), &flow).unwrap();
        assert!((a.loss - 2.5 - b.loss).abs() <= 1e-12);
        for (x, y) in a.grads.iter().zip(&b.grads) {
            assert!((x - y).abs() <= 1e-12);
        }
    }

    #[test]
    fn nll_identity_on_uniform_sphere() {
        let model = Arc::new(init_params(&Arch::zmlp(), 1));
        let m = SphereManifold::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pts: Vec<[f64; 3]> = (0..16).map(|_| uniform_sample(&mut rng).coords()).collect();
        let out = nll_step(&m, &model, &pts, &FlowConfig::default()).unwrap();
        assert!((out.loss - (4.0 * std::f64::consts::PI).ln()).abs() <= 1e-10);
    }

    #[test]
    fn zero_iterations_and_determinism() {
        let c = ToyCoeffs::set(3, 2).unwrap();
        let init = init_params(&Arch::deepset(2), 4);
        let cfg = TrainConfig { iterations: 0, ..TrainConfig::default() };
        let r = train(&cfg, &Problem::Toy(c), init.clone(), |_| {}).unwrap();
        assert_eq!(r.final_model, init);
        let cfg = TrainConfig { iterations: 3, batch: 4, seed: 11, ..TrainConfig::default() };
        let a = train(&cfg, &Problem::Toy(c), init.clone(), |_| {}).unwrap();
        let b = train(&cfg, &Problem::Toy(c), init.clone(), |_| {}).unwrap();
        let strip = |r: &TrainReport| r.metrics.iter().map(|m| (m.iter, m.loss, m.grad_norm, m.lr)).collect::<Vec<_>>();
        assert_eq!(strip(&a), strip(&b));
        assert_eq!(a.final_model, b.final_model);
        assert!(train(&cfg, &Problem::Toy(c), init_params(&Arch::zmlp(), 0), |_| {}).is_err());
    }
}
