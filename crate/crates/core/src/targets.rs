//! Target densities and data sources.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use thiserror::Error;

use crate::diff::Real;
use crate::sphere::{from_latlon, SpherePoint};
use crate::sun::{weyl_grid, SunError};

#[derive(Debug, Error)]
pub enum TargetError {
    #[error("invalid target: {0}")]
    Invalid(String),
    #[error(transparent)]
    Sun(#[from] SunError),
    #[error("rejection sampler exceeded {0} draws")]
    RejectionCap(usize),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("header has no latitude/longitude columns")]
    MissingColumns,
    #[error("no valid rows ({rejected} rejected)")]
    NoValidRows { rejected: usize },
}

/// Coefficients of `(β/n) Re tr(c₁U + c₂U² + c₃U³)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ToyCoeffs {
    pub c: [f64; 3],
    pub beta: f64,
    pub n: usize,
}

impl ToyCoeffs {
    pub fn new(c: [f64; 3], beta: f64, n: usize) -> Result<Self, TargetError> {
        if n != 2 && n != 3 {
            return Err(TargetError::Invalid(format!("dimension {n}")));
        }
        if !(beta > 0.0) || !beta.is_finite() || c.iter().any(|x| !x.is_finite()) {
            return Err(TargetError::Invalid(format!("beta {beta}, c {c:?}")));
        }
        Ok(Self { c, beta, n })
    }

    /// Coefficient sets 1–3.
    pub fn set(index: usize, n: usize) -> Result<Self, TargetError> {
        let c = match index {
            1 => [0.98, -0.63, -0.21],
            2 => [0.17, -0.65, 1.22],
            3 => [1.0, 0.0, 0.0],
            _ => return Err(TargetError::Invalid(format!("coefficient set {index}"))),
        };
        Self::new(c, 9.0, n)
    }
}

/// `(β/n) Σ_k c_k Σ_i cos(kθᵢ)`.
pub fn toy_log_density_unnorm<S: Real>(c: &ToyCoeffs, angles: &[S]) -> S {
    let mut terms: Vec<(f64, S)> = Vec::with_capacity(3 * angles.len());
    let scale = c.beta / c.n as f64;
    for (k, &ck) in c.c.iter().enumerate() {
        if ck == 0.0 {
            continue;
        }
        for &th in angles {
            terms.push((scale * ck, (th * (k + 1) as f64).cos()));
        }
    }
    S::lin_comb(&terms)
}

/// `log ∫ exp(f) dHaar` by Weyl quadrature, evaluated stably.
pub fn toy_log_normalizer(c: &ToyCoeffs, resolution: usize) -> Result<f64, TargetError> {
    let min = if c.n == 2 { 512 } else { 256 };
    if resolution < min {
        return Err(TargetError::Invalid(format!("resolution {resolution} below {min}")));
    }
    let grid = weyl_grid(c.n, resolution)?;
    let vals: Vec<(f64, f64)> = grid.iter().map(|(a, w)| (toy_log_density_unnorm(c, a), *w)).collect();
    let top = vals.iter().map(|v| v.0).fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = vals.iter().map(|(f, w)| w * (f - top).exp()).sum();
    Ok(top + s.ln())
}

/// Mixture of Gaussian bands in `z`, uniform in longitude.
#[derive(Debug, Clone, PartialEq)]
pub struct BandTarget {
    components: Vec<(f64, f64, f64)>,
    log_norm: f64,
}

const BAND_QUAD_POINTS: usize = 20_001;
pub const REJECTION_CAP: usize = 1_000_000;

impl BandTarget {
    /// Components `(z₀, σ, w)`; weights must sum to one.
    pub fn new(components: Vec<(f64, f64, f64)>) -> Result<Self, TargetError> {
        if components.is_empty() {
            return Err(TargetError::Invalid("no band components".into()));
        }
        let wsum: f64 = components.iter().map(|c| c.2).sum();
        for &(z0, s, w) in &components {
            if !(-1.0..=1.0).contains(&z0) || !(s >= 1e-3) || !(w > 0.0) {
                return Err(TargetError::Invalid(format!("component ({z0}, {s}, {w})")));
            }
        }
        if (wsum - 1.0).abs() > 1e-9 {
            return Err(TargetError::Invalid(format!("weights sum to {wsum}")));
        }
        let mut bt = Self { components, log_norm: 0.0 };
        // ∫_{S²} m(z) dA = 2π ∫ m(z) dz, Simpson's rule
        let n = BAND_QUAD_POINTS - 1;
        let h = 2.0 / n as f64;
        let mut acc = 0.0;
        for i in 0..=n {
            let z = -1.0 + i as f64 * h;
            let w = if i == 0 || i == n {
                1.0
            } else if i % 2 == 1 {
                4.0
            } else {
                2.0
            };
            acc += w * bt.mixture(z);
        }
        bt.log_norm = (2.0 * PI * acc * h / 3.0).ln();
        Ok(bt)
    }

    pub fn components(&self) -> &[(f64, f64, f64)] {
        &self.components
    }

    fn mixture(&self, z: f64) -> f64 {
        self.components
            .iter()
            .map(|&(z0, s, w)| w * (-(z - z0).powi(2) / (2.0 * s * s)).exp() / (s * (2.0 * PI).sqrt()))
            .sum()
    }

    /// Density of `z` on `[−1, 1]`.
    pub fn z_marginal(&self, z: f64) -> f64 {
        2.0 * PI * (self.mixture(z).ln() - self.log_norm).exp()
    }
}

impl Default for BandTarget {
    fn default() -> Self {
        Self::new(vec![(0.65, 0.18, 0.5), (-0.35, 0.25, 0.5)]).expect("default bands are valid")
    }
}

/// Normalized log density on S² with respect to area.
pub fn band_log_density(bt: &BandTarget, p: &SpherePoint) -> f64 {
    band_log_density_z(bt, p.z())
}

/// [`band_log_density`] as a function of the height `z`, for any carrier.
pub fn band_log_density_z<S: Real>(bt: &BandTarget, z: S) -> S {
    let terms: Vec<(f64, S)> = bt
        .components
        .iter()
        .map(|&(z0, s, w)| (w / (s * (2.0 * PI).sqrt()), ((z - z0).square() * (-0.5 / (s * s))).exp()))
        .collect();
    S::lin_comb(&terms).ln() - bt.log_norm
}

/// Draw `z` by rejection against a uniform proposal, longitude uniformly.
pub fn band_sample<R: Rng + ?Sized>(bt: &BandTarget, rng: &mut R) -> Result<SpherePoint, TargetError> {
    let bound: f64 = bt.components.iter().map(|&(_, s, w)| w / (s * (2.0 * PI).sqrt())).sum();
    for _ in 0..REJECTION_CAP {
        let z: f64 = rng.random_range(-1.0..=1.0);
        if rng.random::<f64>() * bound <= bt.mixture(z) {
            let phi: f64 = rng.random_range(-PI..PI);
            let r = (1.0 - z * z).max(0.0).sqrt();
            return SpherePoint::new(r * phi.cos(), r * phi.sin(), z)
                .map_err(|e| TargetError::Invalid(e.to_string()));
        }
    }
    Err(TargetError::RejectionCap(REJECTION_CAP))
}

/// Impact locations plus the rows that were skipped.
#[derive(Debug, Clone)]
pub struct ImpactData {
    pub points: Vec<SpherePoint>,
    /// `(1-based data row, reason)`.
    pub rejected: Vec<(usize, String)>,
}

/// Read a CSV with latitude/longitude columns in decimal degrees. Columns
/// are found by case-insensitive `lat` / `lon` prefixes.
pub fn load_impacts_csv(path: &Path) -> Result<ImpactData, TargetError> {
    let file = std::fs::File::open(path).map_err(|source| TargetError::Io { path: path.display().to_string(), source })?;
    let mut rdr = csv::ReaderBuilder::new().flexible(true).trim(csv::Trim::All).from_reader(file);
    let headers = rdr.headers()?.clone();
    let find = |prefix: &str| headers.iter().position(|h| h.to_ascii_lowercase().starts_with(prefix));
    let (lat_i, lon_i) = match (find("lat"), find("lon")) {
        (Some(a), Some(b)) => (a, b),
        _ => return Err(TargetError::MissingColumns),
    };
    let mut data = ImpactData { points: Vec::new(), rejected: Vec::new() };
    for (row, rec) in rdr.records().enumerate() {
        let rec = match rec {
            Ok(r) => r,
            Err(e) => {
                data.rejected.push((row + 1, e.to_string()));
                continue;
            }
        };
        let parse = |i: usize| rec.get(i).and_then(|s| s.parse::<f64>().ok());
        match (parse(lat_i), parse(lon_i)) {
            (Some(lat), Some(lon)) => match from_latlon(lat, lon) {
                Ok(p) => data.points.push(p),
                Err(e) => data.rejected.push((row + 1, e.to_string())),
            },
            _ => data.rejected.push((row + 1, "unparseable latitude/longitude".into())),
        }
    }
    if data.points.is_empty() {
        return Err(TargetError::NoValidRows { rejected: data.rejected.len() });
    }
    Ok(data)
}
