//! Invariant potentials and their parameters.
//!
//! * On SU(n): a DeepSet over eigen-angles. Each angle is embedded as
//!   `(cos θ, sin θ)`, passed through a shared extractor, summed, joined with
//!   the time and regressed to a scalar.
//! * On S²: an MLP of `(z, t)`.
//!
//! Two evaluation routes exist. [`phi_sun`] / [`phi_sphere`] are plain
//! compositions of [`Real`] operations and work for every carrier. The
//! Taylor route ([`NetScalar`]) propagates value, input gradient and input
//! Hessian through the network in one pass; on a [`Tape`] it is recorded as
//! a single fused node with a hand-written reverse pass.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use smallvec::SmallVec;
use thiserror::Error;

use crate::diff::{CustomBackward, Real, Tape, Var};
use crate::linalg::CMatrix;
use crate::sun::{eig_generic, SunError};

pub const FORMAT_MAGIC: &str = "EQUIFLOW";
pub const FORMAT_VERSION: &str = "v1";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("missing or malformed checkpoint header")]
    Header,
    #[error("unsupported checkpoint version {0}")]
    Version(String),
    #[error("unknown architecture descriptor {0:?}")]
    Arch(String),
    #[error("architecture {found} does not match expected {expected}")]
    ArchMismatch { expected: String, found: String },
    #[error("expected {expected} parameters, found {found}")]
    Shape { expected: usize, found: usize },
    #[error("line {line}: cannot parse {text:?} as a finite number")]
    Parse { line: usize, text: String },
}

/// Dense layer `y = W x + b`, `W` row-major with `rows` outputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub rows: usize,
    pub cols: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl Layer {
    fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, w: vec![0.0; rows * cols], b: vec![0.0; rows] }
    }

    fn len(&self) -> usize {
        self.rows * (self.cols + 1)
    }
}

/// Multilayer perceptron: tanh on every layer except the last.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Layer>,
}

impl MlpParams {
    pub fn zeros(dims: &[usize]) -> Self {
        Self { layers: dims.windows(2).map(|d| Layer::zeros(d[1], d[0])).collect() }
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d = vec![self.layers[0].cols];
        d.extend(self.layers.iter().map(|l| l.rows));
        d
    }

    pub fn len(&self) -> usize {
        self.layers.iter().map(Layer::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn write_flat(&self, out: &mut Vec<f64>) {
        for l in &self.layers {
            out.extend_from_slice(&l.w);
            out.extend_from_slice(&l.b);
        }
    }

    fn read_flat(&mut self, src: &[f64]) -> usize {
        let mut at = 0;
        for l in &mut self.layers {
            let nw = l.w.len();
            l.w.copy_from_slice(&src[at..at + nw]);
            at += nw;
            let nb = l.b.len();
            l.b.copy_from_slice(&src[at..at + nb]);
            at += nb;
        }
        at
    }

    fn init(&mut self, rng: &mut ChaCha8Rng, zero_last: bool) {
        let last = self.layers.len() - 1;
        for (i, l) in self.layers.iter_mut().enumerate() {
            if zero_last && i == last {
                continue;
            }
            let bound = 1.0 / (l.cols as f64).sqrt();
            for x in l.w.iter_mut().chain(l.b.iter_mut()) {
                *x = rng.random_range(-bound..=bound);
            }
        }
    }
}

/// Plain MLP evaluation for any carrier; weights enter as constants.
pub fn mlp_forward<S: Real>(p: &MlpParams, x: &[S]) -> Vec<S> {
    let mut cur: Vec<S> = x.to_vec();
    let last = p.layers.len() - 1;
    let mut terms: Vec<(f64, S)> = Vec::new();
    for (li, l) in p.layers.iter().enumerate() {
        let mut next = Vec::with_capacity(l.rows);
        for i in 0..l.rows {
            terms.clear();
            terms.extend(l.w[i * l.cols..(i + 1) * l.cols].iter().zip(&cur).map(|(&w, &x)| (w, x)));
            let a = S::lin_comb(&terms) + l.b[i];
            next.push(if li < last { a.tanh() } else { a });
        }
        cur = next;
    }
    cur
}

/// Extractor and regressor of the SU(n) DeepSet potential.
#[derive(Debug, Clone, PartialEq)]
pub struct DeepSetParams {
    pub n: usize,
    pub extractor: MlpParams,
    pub regressor: MlpParams,
}

/// Network architecture.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Arch {
    DeepSet { n: usize, extractor: Vec<usize>, regressor: Vec<usize> },
    ZMlp { dims: Vec<usize> },
}

impl Arch {
    /// Default SU(n) DeepSet: extractor 2→32→32, regressor 33→32→1.
    pub fn deepset(n: usize) -> Self {
        Self::deepset_width(n, 32)
    }

    pub fn deepset_width(n: usize, width: usize) -> Self {
        Arch::DeepSet { n, extractor: vec![2, width, width], regressor: vec![width + 1, width, 1] }
    }

    /// Default sphere potential: (z, t) → 32 → 32 → 1.
    pub fn zmlp() -> Self {
        Arch::ZMlp { dims: vec![2, 32, 32, 1] }
    }

    pub fn manifold(&self) -> String {
        match self {
            Arch::DeepSet { n, .. } => format!("su{n}"),
            Arch::ZMlp { .. } => "sphere".into(),
        }
    }

    pub fn descriptor(&self) -> String {
        let join = |d: &[usize]| d.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
        match self {
            Arch::DeepSet { extractor, regressor, .. } => {
                format!("deepset:{}/{}", join(extractor), join(regressor))
            }
            Arch::ZMlp { dims } => format!("zmlp:{}", join(dims)),
        }
    }

    pub fn parse(manifold: &str, descriptor: &str) -> Result<Self, ParamError> {
        let bad = || ParamError::Arch(format!("{manifold} {descriptor}"));
        let dims = |s: &str| -> Result<Vec<usize>, ParamError> {
            s.split('-').map(|x| x.parse::<usize>().map_err(|_| bad())).collect()
        };
        let arch = match (manifold, descriptor.split_once(':')) {
            ("su2" | "su3", Some(("deepset", rest))) => {
                let (e, r) = rest.split_once('/').ok_or_else(bad)?;
                let n = if manifold == "su2" { 2 } else { 3 };
                Arch::DeepSet { n, extractor: dims(e)?, regressor: dims(r)? }
            }
            ("sphere", Some(("zmlp", rest))) => Arch::ZMlp { dims: dims(rest)? },
            _ => return Err(bad()),
        };
        arch.validate().map_err(|_| bad())?;
        Ok(arch)
    }

    fn validate(&self) -> Result<(), ()> {
        let ok = match self {
            Arch::DeepSet { n, extractor, regressor } => {
                (*n == 2 || *n == 3)
                    && extractor.len() >= 2
                    && regressor.len() >= 2
                    && extractor[0] == 2
                    && regressor[0] == extractor[extractor.len() - 1] + 1
                    && regressor[regressor.len() - 1] == 1
                    && extractor.iter().chain(regressor).all(|&d| d > 0)
            }
            Arch::ZMlp { dims } => {
                dims.len() >= 2 && dims[0] == 2 && dims[dims.len() - 1] == 1 && dims.iter().all(|&d| d > 0)
            }
        };
        if ok {
            Ok(())
        } else {
            Err(())
        }
    }
}

/// Trainable potential of either manifold.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Sun(DeepSetParams),
    Sphere(MlpParams),
}

impl Model {
    /// All-zero parameters of the given architecture.
    pub fn zeros(arch: &Arch) -> Self {
        match arch {
            Arch::DeepSet { n, extractor, regressor } => Model::Sun(DeepSetParams {
                n: *n,
                extractor: MlpParams::zeros(extractor),
                regressor: MlpParams::zeros(regressor),
            }),
            Arch::ZMlp { dims } => Model::Sphere(MlpParams::zeros(dims)),
        }
    }

    pub fn arch(&self) -> Arch {
        match self {
            Model::Sun(d) => Arch::DeepSet { n: d.n, extractor: d.extractor.dims(), regressor: d.regressor.dims() },
            Model::Sphere(m) => Arch::ZMlp { dims: m.dims() },
        }
    }

    pub fn len(&self) -> usize {
        match self {
            Model::Sun(d) => d.extractor.len() + d.regressor.len(),
            Model::Sphere(m) => m.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Parameters in canonical order: per layer, weights row-major then
    /// biases; extractor before regressor.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.len());
        match self {
            Model::Sun(d) => {
                d.extractor.write_flat(&mut out);
                d.regressor.write_flat(&mut out);
            }
            Model::Sphere(m) => m.write_flat(&mut out),
        }
        out
    }

    pub fn set_flat(&mut self, src: &[f64]) -> Result<(), ParamError> {
        if src.len() != self.len() {
            return Err(ParamError::Shape { expected: self.len(), found: src.len() });
        }
        match self {
            Model::Sun(d) => {
                let k = d.extractor.read_flat(src);
                d.regressor.read_flat(&src[k..]);
            }
            Model::Sphere(m) => {
                m.read_flat(src);
            }
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.to_flat().iter().all(|x| x.is_finite())
    }
}

/// Seeded initialization: every layer uniform in `±1/√fan_in` except the
/// output layer of the potential, which is zero so the initial flow is the
/// identity.
pub fn init_params(arch: &Arch, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::zeros(arch);
    match &mut m {
        Model::Sun(d) => {
            d.extractor.init(&mut rng, false);
            d.regressor.init(&mut rng, true);
        }
        Model::Sphere(p) => p.init(&mut rng, true),
    }
    m
}

/// Seeded parameters with every layer, including the output layer, uniform
/// in `±1/√fan_in`: a generic non-trivial potential.
pub fn random_params(arch: &Arch, seed: u64) -> Model {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = Model::zeros(arch);
    match &mut m {
        Model::Sun(d) => {
            d.extractor.init(&mut rng, false);
            d.regressor.init(&mut rng, false);
        }
        Model::Sphere(p) => p.init(&mut rng, false),
    }
    m
}

/// Checkpoint text: a header line then one float per line.
pub fn serialize_params(model: &Model) -> String {
    let arch = model.arch();
    let mut s = format!("{FORMAT_MAGIC} {FORMAT_VERSION} {} {}\n", arch.manifold(), arch.descriptor());
    for x in model.to_flat() {
        writeln!(s, "{x:.16e}").expect("writing to a String");
    }
    s
}

pub fn deserialize_params(text: &str) -> Result<Model, ParamError> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(ParamError::Header)?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 4 || fields[0] != FORMAT_MAGIC {
        return Err(ParamError::Header);
    }
    if fields[1] != FORMAT_VERSION {
        return Err(ParamError::Version(fields[1].into()));
    }
    let arch = Arch::parse(fields[2], fields[3])?;
    let mut model = Model::zeros(&arch);
    let mut vals = Vec::with_capacity(model.len());
    for (i, line) in lines.enumerate() {
        let t = line.trim();
        if t.is_empty() {
            continue;
        }
        match t.parse::<f64>() {
            Ok(x) if x.is_finite() => vals.push(x),
            _ => return Err(ParamError::Parse { line: i + 2, text: t.into() }),
        }
    }
    model.set_flat(&vals)?;
    Ok(model)
}

/// Deserialize and require a given architecture.
pub fn deserialize_expecting(text: &str, arch: &Arch) -> Result<Model, ParamError> {
    let header = text.lines().next().ok_or(ParamError::Header)?;
    let want = format!("{} {}", arch.manifold(), arch.descriptor());
    let found: Vec<&str> = header.split_whitespace().skip(2).collect();
    if found.join(" ") != want {
        return Err(ParamError::ArchMismatch { expected: want, found: found.join(" ") });
    }
    deserialize_params(text)
}

/// DeepSet potential on sorted eigen-angles.
pub fn phi_angles<S: Real>(p: &DeepSetParams, angles: &[S], t: f64) -> S {
    let mut sorted: SmallVec<[S; 3]> = SmallVec::from_slice(angles);
    sorted.sort_by(|a, b| a.value().total_cmp(&b.value()));
    let width = p.extractor.layers.last().map_or(0, |l| l.rows);
    let mut sum: Vec<S> = vec![S::zero(); width];
    for (i, th) in sorted.iter().enumerate() {
        let e = mlp_forward(&p.extractor, &[th.cos(), th.sin()]);
        if i == 0 {
            sum = e;
        } else {
            for (s, x) in sum.iter_mut().zip(e) {
                *s = *s + x;
            }
        }
    }
    sum.push(S::cst(t));
    mlp_forward(&p.regressor, &sum)[0]
}

/// `Φ(u, t)` on SU(n) for any carrier.
pub fn phi_sun<S: Real>(p: &DeepSetParams, u: &CMatrix<S>, t: f64) -> Result<S, SunError> {
    let angles = eig_generic(u)?;
    Ok(phi_angles(p, &angles, t))
}

/// `Φ(p, t) = MLP(z, t)` on S² for any carrier.
pub fn phi_sphere<S: Real>(p: &MlpParams, point: &[S; 3], t: f64) -> S {
    mlp_forward(p, &[point[2], S::cst(t)])[0]
}

/// Value, input gradient and row-major input Hessian of a potential with
/// respect to its spatial inputs.
#[derive(Debug, Clone)]
pub struct Taylor<S> {
    pub value: S,
    pub grad: SmallVec<[S; 3]>,
    pub hess: SmallVec<[S; 9]>,
}

/// Taylor-mode network state for one layer: the input block `[x | J | H]`
/// and, for tanh layers, the pre-activation block and the activations.
struct LayerCache {
    input: Vec<f64>,
    pre: Vec<f64>,
    y: Vec<f64>,
}

/// Propagate an `m × d` block (component-major: entry `q·d + i` is
/// component `q` of unit `i`) through the MLP, `m = 1 + k + k²`.
fn taylor_forward(p: &MlpParams, cur: Vec<f64>, k: usize, cache: Option<&mut Vec<LayerCache>>) -> Vec<f64> {
    match k {
        1 => taylor_forward_m::<3>(p, cur, k, cache),
        2 => taylor_forward_m::<7>(p, cur, k, cache),
        3 => taylor_forward_m::<13>(p, cur, k, cache),
        _ => unreachable!("at most three spatial inputs"),
    }
}

/// `[⟨w, cur_q⟩ for q < M]` with `cur_q = cur[q·c..(q+1)·c]`.
fn dots<const M: usize>(w: &[f64], cur: &[f64], c: usize) -> [f64; M] {
    let mut acc = [[0.0; 4]; M];
    let full = c / 4 * 4;
    for j in (0..full).step_by(4) {
        let wj: &[f64; 4] = w[j..j + 4].try_into().expect("chunk");
        for q in 0..M {
            let x: &[f64; 4] = cur[q * c + j..q * c + j + 4].try_into().expect("chunk");
            for l in 0..4 {
                acc[q][l] += wj[l] * x[l];
            }
        }
    }
    std::array::from_fn(|q| {
        let mut s = (acc[q][0] + acc[q][1]) + (acc[q][2] + acc[q][3]);
        for j in full..c {
            s += w[j] * cur[q * c + j];
        }
        s
    })
}

fn taylor_forward_m<const M: usize>(
    p: &MlpParams,
    mut cur: Vec<f64>,
    k: usize,
    mut cache: Option<&mut Vec<LayerCache>>,
) -> Vec<f64> {
    let last = p.layers.len() - 1;
    for (li, l) in p.layers.iter().enumerate() {
        let (r, c) = (l.rows, l.cols);
        let mut a = vec![0.0; r * M];
        for i in 0..r {
            let d = dots::<M>(&l.w[i * c..(i + 1) * c], &cur, c);
            for q in 0..M {
                a[q * r + i] = d[q];
            }
            a[i] += l.b[i];
        }
        if li == last {
            if let Some(cc) = cache.as_deref_mut() {
                cc.push(LayerCache { input: cur, pre: Vec::new(), y: Vec::new() });
            }
            cur = a;
            continue;
        }
        let mut out = vec![0.0; r * M];
        let mut ys = vec![0.0; r];
        for i in 0..r {
            let ar: [f64; M] = std::array::from_fn(|q| a[q * r + i]);
            let y = ar[0].tanh();
            let sig = 1.0 - y * y;
            let s1 = -2.0 * y * sig;
            out[i] = y;
            for q in 1..=k {
                out[q * r + i] = sig * ar[q];
            }
            for pp in 0..k {
                for q in 0..k {
                    let h = 1 + k + pp * k + q;
                    out[h * r + i] = sig * ar[h] + s1 * ar[1 + pp] * ar[1 + q];
                }
            }
            ys[i] = y;
        }
        if let Some(cc) = cache.as_deref_mut() {
            cc.push(LayerCache { input: cur, pre: a, y: ys });
        }
        cur = out;
    }
    cur
}

/// Reverse pass of [`taylor_forward`]; parameter adjoints are added into
/// `grad` (canonical order), the input-block adjoint is returned.
fn taylor_backward(p: &MlpParams, k: usize, cache: &[LayerCache], bar: Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
    match k {
        1 => taylor_backward_m::<3>(p, k, cache, bar, grad),
        2 => taylor_backward_m::<7>(p, k, cache, bar, grad),
        3 => taylor_backward_m::<13>(p, k, cache, bar, grad),
        _ => unreachable!("at most three spatial inputs"),
    }
}

fn taylor_backward_m<const M: usize>(
    p: &MlpParams,
    k: usize,
    cache: &[LayerCache],
    mut bar: Vec<f64>,
    grad: &mut [f64],
) -> Vec<f64> {
    debug_assert_eq!(grad.len(), p.len());
    let last = p.layers.len() - 1;
    let mut off = p.len();
    for li in (0..p.layers.len()).rev() {
        let l = &p.layers[li];
        let cch = &cache[li];
        let (r, c) = (l.rows, l.cols);
        if li != last {
            // tanh: bar holds the output adjoint; turn it into the pre-activation adjoint
            for i in 0..r {
                let ar: [f64; M] = std::array::from_fn(|q| cch.pre[q * r + i]);
                let yb: [f64; M] = std::array::from_fn(|q| bar[q * r + i]);
                let y = cch.y[i];
                let sig = 1.0 - y * y;
                let s1 = -2.0 * y * sig;
                let s2 = -2.0 * sig * (1.0 - 3.0 * y * y);
                let mut ab = [0.0; M];
                let mut a0 = yb[0] * sig;
                for q in 1..=k {
                    a0 += yb[q] * ar[q] * s1;
                    ab[q] = sig * yb[q];
                }
                for pp in 0..k {
                    for q in 0..k {
                        let h = 1 + k + pp * k + q;
                        let hb = yb[h];
                        ab[h] = sig * hb;
                        a0 += hb * (s1 * ar[h] + s2 * ar[1 + pp] * ar[1 + q]);
                        ab[1 + pp] += s1 * hb * ar[1 + q];
                        ab[1 + q] += s1 * hb * ar[1 + pp];
                    }
                }
                ab[0] = a0;
                for q in 0..M {
                    bar[q * r + i] = ab[q];
                }
            }
        }
        off -= l.len();
        let (gw, gb) = grad[off..off + l.len()].split_at_mut(r * c);
        let mut cbar = vec![0.0; c * M];
        for i in 0..r {
            gb[i] += bar[i];
            let wrow = &l.w[i * c..(i + 1) * c];
            let grow = &mut gw[i * c..(i + 1) * c];
            for q in 0..M {
                let a = bar[q * r + i];
                if a == 0.0 {
                    continue;
                }
                let cin = &cch.input[q * c..(q + 1) * c];
                let cb = &mut cbar[q * c..(q + 1) * c];
                for j in 0..c {
                    grow[j] += a * cin[j];
                    cb[j] += a * wrow[j];
                }
            }
        }
        bar = cbar;
    }
    bar
}

/// Everything the reverse pass of one DeepSet evaluation needs.
pub struct DeepSetCache {
    n: usize,
    trig: SmallVec<[(f64, f64); 3]>,
    extractor: Vec<Vec<LayerCache>>,
    regressor: Vec<LayerCache>,
}

/// Taylor evaluation of the DeepSet in `f64`: value, gradient and Hessian
/// with respect to the (sorted) angles.
pub fn deepset_taylor(p: &DeepSetParams, angles: &[f64], t: f64, want_cache: bool) -> (Taylor<f64>, Option<DeepSetCache>) {
    let n = angles.len();
    let m = 1 + n + n * n;
    let width = p.extractor.layers.last().map_or(0, |l| l.rows);
    let mut creg = vec![0.0; (width + 1) * m];
    let mut ext_caches = Vec::new();
    let mut trig = SmallVec::new();
    for (i, &th) in angles.iter().enumerate() {
        let (s, c) = th.sin_cos();
        trig.push((s, c));
        let input = vec![c, s, -s, c, -c, -s];
        let mut cache = Vec::new();
        let e = taylor_forward(&p.extractor, input, 1, want_cache.then_some(&mut cache));
        let cols = width + 1;
        for r in 0..width {
            creg[r] += e[r];
            creg[(1 + i) * cols + r] = e[width + r];
            creg[(1 + n + i * n + i) * cols + r] = e[2 * width + r];
        }
        ext_caches.push(cache);
    }
    creg[width] = t;
    let mut reg_cache = Vec::new();
    let out = taylor_forward(&p.regressor, creg, n, want_cache.then_some(&mut reg_cache));
    let taylor = Taylor {
        value: out[0],
        grad: SmallVec::from_slice(&out[1..1 + n]),
        hess: SmallVec::from_slice(&out[1 + n..m]),
    };
    let cache = want_cache.then(|| DeepSetCache { n, trig, extractor: ext_caches, regressor: reg_cache });
    (taylor, cache)
}

/// Reverse pass of [`deepset_taylor`]. `out_bar` holds adjoints of
/// `[value, grad…, hess…]`; parameter adjoints are added into `grad`, the
/// angle adjoints are returned.
pub fn deepset_taylor_backward(p: &DeepSetParams, cache: &DeepSetCache, out_bar: &[f64], grad: &mut [f64]) -> SmallVec<[f64; 3]> {
    let n = cache.n;
    let width = p.extractor.layers.last().map_or(0, |l| l.rows);
    let ne = p.extractor.len();
    let (g_ext, g_reg) = grad.split_at_mut(ne);
    let creg_bar = taylor_backward(&p.regressor, n, &cache.regressor, out_bar.to_vec(), g_reg);
    let cols = width + 1;
    let mut out = SmallVec::new();
    for i in 0..n {
        let mut ebar = vec![0.0; width * 3];
        for r in 0..width {
            ebar[r] = creg_bar[r];
            ebar[width + r] = creg_bar[(1 + i) * cols + r];
            ebar[2 * width + r] = creg_bar[(1 + n + i * n + i) * cols + r];
        }
        let xb = taylor_backward(&p.extractor, 1, &cache.extractor[i], ebar, g_ext);
        let (s, c) = cache.trig[i];
        out.push(-s * xb[0] + c * xb[1] - c * xb[2] - s * xb[3] + s * xb[4] - c * xb[5]);
    }
    out
}

/// Reverse-pass state of one sphere-potential evaluation.
pub struct ZMlpCache {
    layers: Vec<LayerCache>,
}

/// Taylor evaluation of the sphere MLP with respect to `z`.
pub fn zmlp_taylor(p: &MlpParams, z: f64, t: f64, want_cache: bool) -> (Taylor<f64>, Option<ZMlpCache>) {
    let input = vec![z, t, 1.0, 0.0, 0.0, 0.0];
    let mut cache = Vec::new();
    let out = taylor_forward(p, input, 1, want_cache.then_some(&mut cache));
    let taylor = Taylor { value: out[0], grad: SmallVec::from_slice(&[out[1]]), hess: SmallVec::from_slice(&[out[2]]) };
    (taylor, want_cache.then_some(ZMlpCache { layers: cache }))
}

/// Reverse pass of [`zmlp_taylor`]; returns the adjoint of `z`.
pub fn zmlp_taylor_backward(p: &MlpParams, cache: &ZMlpCache, out_bar: &[f64], grad: &mut [f64]) -> f64 {
    let xb = taylor_backward(p, 1, &cache.layers, out_bar.to_vec(), grad);
    xb[0]
}

/// Scalars on which the Taylor route of a [`Model`] can run.
pub trait NetScalar: Real {
    /// Where the parameters live: nothing for plain floats, the tape
    /// position of the parameter leaves for taped scalars.
    type Binding: Clone;

    /// `inputs` are the sorted eigen-angles for SU(n) or `[z]` on S².
    fn taylor(model: &Arc<Model>, binding: &Self::Binding, inputs: &[Self], t: f64) -> Taylor<Self>;
}

impl NetScalar for f64 {
    type Binding = ();

    fn taylor(model: &Arc<Model>, _: &(), inputs: &[f64], t: f64) -> Taylor<f64> {
        match model.as_ref() {
            Model::Sun(p) => deepset_taylor(p, inputs, t, false).0,
            Model::Sphere(p) => zmlp_taylor(p, inputs[0], t, false).0,
        }
    }
}

/// Parameter leaves of a model registered contiguously on a tape.
#[derive(Clone, Copy)]
pub struct ParamLeaves<'t> {
    pub tape: &'t Tape,
    pub base: usize,
}

/// Register every parameter of `model` as a tape leaf.
pub fn register_params<'t>(tape: &'t Tape, model: &Model) -> (ParamLeaves<'t>, Vec<Var<'t>>) {
    let flat = model.to_flat();
    let vars: Vec<Var<'t>> = flat.iter().map(|&x| tape.var(x)).collect();
    let base = vars.first().and_then(Var::index).unwrap_or(tape.len());
    (ParamLeaves { tape, base }, vars)
}

enum NodeCache {
    Sun(DeepSetCache),
    Sphere(ZMlpCache),
}

struct NetNode {
    model: Arc<Model>,
    base: usize,
    inputs: SmallVec<[Option<usize>; 3]>,
    cache: NodeCache,
}

impl CustomBackward for NetNode {
    fn backward(&self, out_adj: &[f64], adj: &mut [f64]) {
        let np = self.model.len();
        let grad = &mut adj[self.base..self.base + np];
        let xbar: SmallVec<[f64; 3]> = match (self.model.as_ref(), &self.cache) {
            (Model::Sun(p), NodeCache::Sun(c)) => deepset_taylor_backward(p, c, out_adj, grad),
            (Model::Sphere(p), NodeCache::Sphere(c)) => SmallVec::from_slice(&[zmlp_taylor_backward(p, c, out_adj, grad)]),
            _ => unreachable!("cache kind always matches the model"),
        };
        for (idx, b) in self.inputs.iter().zip(xbar) {
            if let Some(i) = idx {
                adj[*i] += b;
            }
        }
    }
}

impl<'t> NetScalar for Var<'t> {
    type Binding = ParamLeaves<'t>;

    fn taylor(model: &Arc<Model>, b: &ParamLeaves<'t>, inputs: &[Self], t: f64) -> Taylor<Self> {
        let x: SmallVec<[f64; 3]> = inputs.iter().map(Real::value).collect();
        let (taylor, cache) = match model.as_ref() {
            Model::Sun(p) => {
                let (tay, c) = deepset_taylor(p, &x, t, true);
                (tay, NodeCache::Sun(c.expect("cache requested")))
            }
            Model::Sphere(p) => {
                let (tay, c) = zmlp_taylor(p, x[0], t, true);
                (tay, NodeCache::Sphere(c.expect("cache requested")))
            }
        };
        let mut values: SmallVec<[f64; 13]> = SmallVec::new();
        values.push(taylor.value);
        values.extend_from_slice(&taylor.grad);
        values.extend_from_slice(&taylor.hess);
        let node = NetNode { model: Arc::clone(model), base: b.base, inputs: inputs.iter().map(Var::index).collect(), cache };
        let outs = b.tape.custom(&values, Box::new(node));
        let k = taylor.grad.len();
        Taylor {
            value: outs[0],
            grad: SmallVec::from_slice(&outs[1..1 + k]),
            hess: SmallVec::from_slice(&outs[1 + k..]),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::Jet2;
    use crate::sun::{conjugate, haar_sample};

    fn randomized(arch: &Arch, seed: u64) -> Model {
        let mut m = init_params(arch, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabc);
        let flat: Vec<f64> = m.to_flat().iter().map(|&x| if x == 0.0 { rng.random_range(-0.5..0.5) } else { x }).collect();
        m.set_flat(&flat).unwrap();
        m
    }

    #[test]
    fn parameter_counts() {
        assert_eq!(Model::zeros(&Arch::deepset(2)).len(), 2273);
        assert_eq!(Model::zeros(&Arch::zmlp()).len(), 1185);
    }

    #[test]
    fn init_is_seeded_bounded_and_zero_output() {
        let a = init_params(&Arch::deepset(3), 9);
        assert_eq!(a, init_params(&Arch::deepset(3), 9));
        assert_ne!(a, init_params(&Arch::deepset(3), 10));
        let Model::Sun(d) = &a else { unreachable!() };
        let l0 = &d.extractor.layers[0];
        assert!(l0.w.iter().all(|w| w.abs() <= 1.0 / 2f64.sqrt()));
        let l1 = &d.regressor.layers[0];
        assert!(l1.w.iter().all(|w| w.abs() <= 1.0 / 33f64.sqrt()));
        let last = d.regressor.layers.last().unwrap();
        assert!(last.w.iter().chain(&last.b).all(|&x| x == 0.0));
        let u = haar_sample(3, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(phi_sun(d, u.matrix(), 0.3).unwrap(), 0.0);
    }

    #[test]
    fn checkpoint_round_trip_and_errors() {
        let m = randomized(&Arch::deepset(2), 4);
        let text = serialize_params(&m);
        assert!(text.starts_with("EQUIFLOW v1 su2 deepset:2-32-32/33-32-1\n"));
        assert_eq!(deserialize_params(&text).unwrap(), m);
        let cut: String = text.lines().take(100).collect::<Vec<_>>().join("\n");
        assert!(matches!(deserialize_params(&cut), Err(ParamError::Shape { .. })));
        let sphere = serialize_params(&init_params(&Arch::zmlp(), 1));
        assert!(matches!(deserialize_expecting(&sphere, &Arch::deepset(2)), Err(ParamError::ArchMismatch { .. })));
        assert!(matches!(deserialize_params(&text.replace("v1", "v9")), Err(ParamError::Version(_))));
        assert!(matches!(deserialize_params("hello"), Err(ParamError::Header)));
    }

    #[test]
    fn conjugation_invariance_and_permutation() {
        let m = randomized(&Arch::deepset(3), 2);
        let Model::Sun(d) = &m else { unreachable!() };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..100 {
            let u = haar_sample(3, &mut rng).unwrap();
            let g = haar_sample(3, &mut rng).unwrap();
            let t = rng.random_range(0.0..1.0);
            let a = phi_sun(d, u.matrix(), t).unwrap();
            let b = phi_sun(d, conjugate(&u, &g).unwrap().matrix(), t).unwrap();
            assert!((a - b).abs() <= 1e-9);
        }
        let th = [0.3, -1.2, 0.9];
        assert_eq!(phi_angles(d, &th, 0.5), phi_angles(d, &[0.9, 0.3, -1.2], 0.5));
    }

    #[test]
    fn jet_values_equal_plain_values() {
        let m = randomized(&Arch::deepset(3), 5);
        let Model::Sun(d) = &m else { unreachable!() };
        let u = haar_sample(3, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let lifted = u.matrix().map(|z| crate::linalg::Complex { re: Jet2::variable(z.re), im: Jet2::constant(z.im) });
        assert_eq!(phi_sun(d, &lifted, 0.4).unwrap().v, phi_sun(d, u.matrix(), 0.4).unwrap());
        let s = randomized(&Arch::zmlp(), 5);
        let Model::Sphere(p) = &s else { unreachable!() };
        let pt = [0.6, 0.0, 0.8];
        let lifted = pt.map(Jet2::variable);
        assert_eq!(phi_sphere(p, &lifted, 0.2).v, phi_sphere(p, &pt, 0.2));
    }

    #[test]
    fn taylor_matches_nested_jets() {
        let m = randomized(&Arch::deepset(3), 6);
        let Model::Sun(d) = &m else { unreachable!() };
        let th = [-2.0, 0.4, 1.6];
        let (tay, _) = deepset_taylor(d, &th, 0.7, false);
        assert_eq!(tay.value, phi_angles(d, &th, 0.7));
        for i in 0..3 {
            for j in 0..3 {
                // mixed second derivative from two nested first-order jets
                let inner = |h: f64| {
                    let x: Vec<Jet2<f64>> =
                        (0..3).map(|a| Jet2::new(th[a] + if a == j { h } else { 0.0 }, if a == i { 1.0 } else { 0.0 }, 0.0)).collect();
                    phi_angles(d, &x, 0.7).d1
                };
                let fd = (inner(1e-5) - inner(-1e-5)) / 2e-5;
                assert!((tay.hess[i * 3 + j] - fd).abs() < 1e-6, "H[{i}{j}]");
            }
            let x: Vec<Jet2<f64>> = (0..3).map(|a| Jet2::new(th[a], if a == i { 1.0 } else { 0.0 }, 0.0)).collect();
            let j = phi_angles(d, &x, 0.7);
            assert!((tay.grad[i] - j.d1).abs() < 1e-12);
            assert!((tay.hess[i * 3 + i] - j.d2).abs() < 1e-12);
        }
    }

    fn check_vjp(model: &Model, inputs: &[f64], t: f64) {
        let weights: Vec<f64> = (0..1 + inputs.len() + inputs.len().pow(2)).map(|i| 0.3 + 0.17 * i as f64).collect();
        let scalar = |m: &Model, x: &[f64]| -> f64 {
            let tay = f64::taylor(&Arc::new(m.clone()), &(), x, t);
            let mut all = vec![tay.value];
            all.extend(tay.grad);
            all.extend(tay.hess);
            all.iter().zip(&weights).map(|(a, w)| a * w).sum()
        };
        let tape = Tape::new();
        let model_rc = Arc::new(model.clone());
        let (leaves, params) = register_params(&tape, model);
        let xs: Vec<Var> = inputs.iter().map(|&x| tape.var(x)).collect();
        let tay = Var::taylor(&model_rc, &leaves, &xs, t);
        let mut terms = vec![(weights[0], tay.value)];
        let mut w = 1;
        for g in tay.grad.iter().chain(tay.hess.iter()) {
            terms.push((weights[w], *g));
            w += 1;
        }
        let out = Var::lin_comb(&terms);
        assert!((out.value() - scalar(model, inputs)).abs() < 1e-12);
        let grads = tape.backward(out);
        let flat = model.to_flat();
        for idx in (0..flat.len()).step_by(97).chain([flat.len() - 1]) {
            let h = 1e-6;
            let mut plus = model.clone();
            let mut f = flat.clone();
            f[idx] += h;
            plus.set_flat(&f).unwrap();
            let mut minus = model.clone();
            f[idx] -= 2.0 * h;
            minus.set_flat(&f).unwrap();
            let fd = (scalar(&plus, inputs) - scalar(&minus, inputs)) / (2.0 * h);
            let g = grads.wrt(&params[idx]);
            assert!((g - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "param {idx}: {g} vs {fd}");
        }
        for (i, x) in xs.iter().enumerate() {
            let h = 1e-6;
            let mut p = inputs.to_vec();
            p[i] += h;
            let a = scalar(model, &p);
            p[i] -= 2.0 * h;
            let b = scalar(model, &p);
            let fd = (a - b) / (2.0 * h);
            assert!((grads.wrt(x) - fd).abs() <= 1e-6 * (1.0 + fd.abs()), "input {i}");
        }
    }

    #[test]
    fn fused_node_reverse_pass_matches_finite_differences() {
        check_vjp(&randomized(&Arch::deepset(2), 11), &[-0.7, 0.7], 0.25);
        check_vjp(&randomized(&Arch::deepset(3), 12), &[-2.1, 0.3, 1.8], 0.6);
        check_vjp(&randomized(&Arch::zmlp(), 13), &[0.35], 0.9);
    }
}
