//! Density grids, heatmaps, samples and the interval density.

use std::f64::consts::PI;
use std::fmt::Write as _;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::flow::{model_log_density, push_sample, FlowConfig, NetPotential, SphereManifold, SunManifold};
use crate::potentials::Model;
use crate::sphere::from_latlon;
use crate::sun::{diagonal, haar_log_volume, weyl_grid};
use crate::targets::{toy_log_density_unnorm, ToyCoeffs};
use crate::train::{PriorSampler, TrainError};

/// Decades of dynamic range shown by [`heatmap_ppm`].
pub const LOG_DECADES: f64 = 4.0;

/// Weyl weights below this fraction of the largest count as zero.
pub const NEGLIGIBLE_WEYL_WEIGHT: f64 = 1e-12;

/// Map `f` over `items` on all available cores, preserving order.
pub fn par_map<T: Sync, U: Send>(items: &[T], f: impl Fn(&T) -> U + Sync) -> Vec<U> {
    let threads = std::thread::available_parallelism().map_or(1, |n| n.get()).min(items.len().max(1));
    if threads <= 1 {
        return items.iter().map(&f).collect();
    }
    let chunk = items.len().div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = items.chunks(chunk).map(|c| s.spawn(|| c.iter().map(&f).collect::<Vec<U>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    })
}

fn sun_of(model: &Model) -> Result<usize, TrainError> {
    match model {
        Model::Sun(d) => Ok(d.n),
        Model::Sphere(_) => Err(TrainError::Config("expected an SU(n) checkpoint".into())),
    }
}

fn require_sphere(model: &Model) -> Result<(), TrainError> {
    match model {
        Model::Sphere(_) => Ok(()),
        Model::Sun(_) => Err(TrainError::Config("expected a sphere checkpoint".into())),
    }
}

/// Model log density (Haar reference) of the diagonal element with the
/// given angles.
pub fn sun_log_q(model: &Arc<Model>, angles: &[f64], flow: &FlowConfig) -> Result<f64, TrainError> {
    let m = SunManifold::new(sun_of(model)?)?;
    Ok(model_log_density(&m, &NetPotential::plain(Arc::clone(model)), &diagonal(angles), flow)?)
}

/// Model log density (area reference) at a point of S².
pub fn sphere_log_q(model: &Arc<Model>, p: &[f64; 3], flow: &FlowConfig) -> Result<f64, TrainError> {
    require_sphere(model)?;
    Ok(model_log_density(&SphereManifold::new(), &NetPotential::plain(Arc::clone(model)), p, flow)?)
}

/// Uniform grid of `n` points on `[a, b]`, endpoints included.
pub fn linspace(a: f64, b: f64, n: usize) -> Vec<f64> {
    (0..n).map(|j| if n == 1 { a } else { a + (b - a) * j as f64 / (n - 1) as f64 }).collect()
}

pub fn trapezoid(xs: &[f64], ys: &[f64]) -> f64 {
    xs.windows(2).zip(ys.windows(2)).map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1])).sum()
}

/// One row of the SU(2) θ-marginal export.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Su2Row {
    pub theta: f64,
    pub model: f64,
    pub target: Option<f64>,
}

/// Density of the eigen-angle `θ` of `diag(e^{iθ}, e^{−iθ})` on `[−π, π]`:
/// `q · sin²θ / π`, which integrates to one over the interval.
pub fn su2_grid(
    model: &Arc<Model>,
    target: Option<(&ToyCoeffs, f64)>,
    resolution: usize,
    flow: &FlowConfig,
) -> Result<Vec<Su2Row>, TrainError> {
    if sun_of(model)? != 2 {
        return Err(TrainError::Config("expected an SU(2) checkpoint".into()));
    }
    if resolution < 2 {
        return Err(TrainError::Config("resolution must be at least 2".into()));
    }
    let thetas = linspace(-PI, PI, resolution);
    let logs = par_map(&thetas, |&t| sun_log_q(model, &[t, -t], flow));
    thetas
        .iter()
        .zip(logs)
        .map(|(&t, lq)| {
            let haar = t.sin().powi(2) / PI;
            let target = target.map(|(c, log_z)| (toy_log_density_unnorm(c, &[t, -t]) - log_z).exp() * haar);
            Ok(Su2Row { theta: t, model: lq?.exp() * haar, target })
        })
        .collect()
}

/// Weyl density of `(θ₁, θ₂)` on `[−π, π)²` for SU(3), `θ₃ = −θ₁ − θ₂`.
pub fn su3_weyl_density(t1: f64, t2: f64) -> f64 {
    haar_log_volume(&[t1, t2, -t1 - t2]).exp() / (24.0 * PI * PI)
}

const SU3_WEYL_MAX: f64 = 27.0 / (24.0 * PI * PI);

/// Total model mass `∫ q dHaar` by Weyl quadrature on SU(n).
pub fn weyl_mass(model: &Arc<Model>, resolution: usize, flow: &FlowConfig) -> Result<f64, TrainError> {
    let grid = weyl_grid(sun_of(model)?, resolution)?;
    let wmax = grid.iter().map(|p| p.1).fold(0.0, f64::max);
    let terms = par_map(&grid, |(a, w)| -> Result<f64, TrainError> {
        if *w < NEGLIGIBLE_WEYL_WEIGHT * wmax {
            return Ok(0.0);
        }
        Ok(w * sun_log_q(model, a, flow)?.exp())
    });
    terms.into_iter().sum()
}

/// `(θ₁, θ₂, density)` rows on the half-open grid `−π + 2πj/N`, row-major
/// in `θ₁`.
pub fn su3_grid(model: &Arc<Model>, resolution: usize, flow: &FlowConfig) -> Result<Vec<[f64; 3]>, TrainError> {
    if sun_of(model)? != 3 {
        return Err(TrainError::Config("expected an SU(3) checkpoint".into()));
    }
    if resolution < 2 {
        return Err(TrainError::Config("resolution must be at least 2".into()));
    }
    let axis: Vec<f64> = (0..resolution).map(|j| -PI + 2.0 * PI * j as f64 / resolution as f64).collect();
    let pts: Vec<(f64, f64)> = axis.iter().flat_map(|&a| axis.iter().map(move |&b| (a, b))).collect();
    let vals = par_map(&pts, |&(a, b)| -> Result<f64, TrainError> {
        let w = su3_weyl_density(a, b);
        if w < NEGLIGIBLE_WEYL_WEIGHT * SU3_WEYL_MAX {
            return Ok(0.0);
        }
        Ok(sun_log_q(model, &[a, b, -a - b], flow)?.exp() * w)
    });
    pts.iter().zip(vals).map(|(&(a, b), v)| Ok([a, b, v?])).collect()
}

/// `(lat, lon, density)` rows at cell midpoints of an `N × N` latitude ×
/// longitude grid, north first.
pub fn sphere_grid(model: &Arc<Model>, resolution: usize, flow: &FlowConfig) -> Result<Vec<[f64; 3]>, TrainError> {
    require_sphere(model)?;
    if resolution < 2 {
        return Err(TrainError::Config("resolution must be at least 2".into()));
    }
    let n = resolution as f64;
    let mut pts = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        let lat = 90.0 - 180.0 * (i as f64 + 0.5) / n;
        for j in 0..resolution {
            pts.push((lat, -180.0 + 360.0 * (j as f64 + 0.5) / n));
        }
    }
    let vals = par_map(&pts, |&(lat, lon)| -> Result<f64, TrainError> {
        let p = from_latlon(lat, lon).map_err(|e| TrainError::Config(e.to_string()))?;
        Ok(sphere_log_q(model, &p.coords(), flow)?.exp())
    });
    pts.iter().zip(vals).map(|(&(a, b), v)| Ok([a, b, v?])).collect()
}

/// Quadrature of a [`sphere_grid`] over S².
pub fn sphere_grid_integral(rows: &[[f64; 3]], resolution: usize) -> f64 {
    let cell = (PI / resolution as f64) * (2.0 * PI / resolution as f64);
    rows.iter().map(|r| r[2] * r[0].to_radians().cos() * cell).sum()
}

/// Density of the height `z ∈ [−1, 1]`: area density times the circle
/// length `2π√(1−z²)` times the Archimedes factor `1/√(1−z²)`.
pub fn interval_density(model: &Arc<Model>, resolution: usize, flow: &FlowConfig) -> Result<Vec<(f64, f64)>, TrainError> {
    require_sphere(model)?;
    if resolution < 2 {
        return Err(TrainError::Config("resolution must be at least 2".into()));
    }
    let zs = linspace(-1.0, 1.0, resolution);
    let vals = par_map(&zs, |&z| -> Result<f64, TrainError> {
        let r = (1.0 - z * z).max(0.0).sqrt();
        Ok(2.0 * PI * sphere_log_q(model, &[r, 0.0, z], flow)?.exp())
    });
    zs.iter().zip(vals).map(|(&z, v)| Ok((z, v?))).collect()
}

/// Header and rows of `count` model samples with their `log_q`.
pub fn sample_rows(model: &Arc<Model>, count: usize, seed: u64, flow: &FlowConfig) -> Result<(Vec<String>, Vec<Vec<f64>>), TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let pot = NetPotential::plain(Arc::clone(model));
    match model.as_ref() {
        Model::Sun(d) => {
            let m = SunManifold::new(d.n)?;
            let mut header = Vec::new();
            for i in 0..d.n {
                for j in 0..d.n {
                    header.push(format!("re_{i}{j}"));
                    header.push(format!("im_{i}{j}"));
                }
            }
            header.push("log_q".into());
            let mut rows = Vec::with_capacity(count);
            for _ in 0..count {
                let u = m.sample_prior(&mut rng)?;
                let (x, lq) = push_sample(&m, &pot, &u, flow)?;
                let mut row = Vec::with_capacity(2 * d.n * d.n + 1);
                for i in 0..d.n {
                    for j in 0..d.n {
                        row.push(x[(i, j)].re);
                        row.push(x[(i, j)].im);
                    }
                }
                row.push(lq);
                rows.push(row);
            }
            Ok((header, rows))
        }
        Model::Sphere(_) => {
            let m = SphereManifold::new();
            let header = ["x", "y", "z", "log_q"].map(String::from).to_vec();
            let mut rows = Vec::with_capacity(count);
            for _ in 0..count {
                let u = m.sample_prior(&mut rng)?;
                let (x, lq) = push_sample(&m, &pot, &u, flow)?;
                rows.push(vec![x[0], x[1], x[2], lq]);
            }
            Ok((header, rows))
        }
    }
}

/// Comma-separated text with a header row and LF line endings.
pub fn csv_text<R: AsRef<[f64]>>(header: &[&str], rows: &[R]) -> String {
    let mut s = header.join(",");
    s.push('\n');
    for r in rows {
        let mut first = true;
        for v in r.as_ref() {
            if !first {
                s.push(',');
            }
            first = false;
            let _ = write!(s, "{v}");
        }
        s.push('\n');
    }
    s
}

const VIRIDIS_ANCHORS: [[i32; 3]; 9] = [
    [68, 1, 84],
    [71, 44, 122],
    [59, 81, 139],
    [44, 113, 142],
    [33, 144, 141],
    [39, 173, 129],
    [92, 200, 99],
    [170, 220, 50],
    [253, 231, 37],
];

const fn build_viridis() -> [[u8; 3]; 256] {
    let mut t = [[0u8; 3]; 256];
    let mut i = 0;
    while i < 256 {
        let num = i as i32 * 8;
        let seg = if num / 255 >= 8 { 7 } else { num / 255 };
        let rem = num - seg * 255;
        let mut c = 0;
        while c < 3 {
            let a = VIRIDIS_ANCHORS[seg as usize][c];
            let b = VIRIDIS_ANCHORS[seg as usize + 1][c];
            t[i][c] = ((a * 255 + (b - a) * rem + 127) / 255) as u8;
            c += 1;
        }
        i += 1;
    }
    t
}

/// 256-entry viridis-like colormap.
pub static VIRIDIS: [[u8; 3]; 256] = build_viridis();

/// Binary PPM (P6) of row-major `values`: normalized to maximum one, then
/// coloured on a logarithmic scale spanning [`LOG_DECADES`] decades.
pub fn heatmap_ppm(values: &[f64], width: usize, height: usize) -> Vec<u8> {
    assert_eq!(values.len(), width * height, "heatmap shape");
    let max = values.iter().copied().filter(|v| v.is_finite()).fold(0.0, f64::max);
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    for &v in values {
        let idx = if max > 0.0 && v.is_finite() && v > 0.0 {
            let t = 1.0 + (v / max).log10() / LOG_DECADES;
            (t.clamp(0.0, 1.0) * 255.0).round() as usize
        } else {
            0
        };
        out.extend_from_slice(&VIRIDIS[idx]);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::potentials::{init_params, Arch};

    #[test]
    fn identity_su2_grid_is_haar_marginal() {
        let model = Arc::new(init_params(&Arch::deepset(2), 0));
        let rows = su2_grid(&model, None, 257, &FlowConfig::default()).unwrap();
        for r in &rows {
            assert!((r.model - r.theta.sin().powi(2) / PI).abs() <= 1e-12);
        }
        let xs: Vec<f64> = rows.iter().map(|r| r.theta).collect();
        let ys: Vec<f64> = rows.iter().map(|r| r.model).collect();
        assert!((trapezoid(&xs, &ys) - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn weyl_density_normalized() {
        let n = 96;
        let h = 2.0 * PI / n as f64;
        let total: f64 = (0..n)
            .flat_map(|i| (0..n).map(move |j| su3_weyl_density(-PI + h * i as f64, -PI + h * j as f64)))
            .sum::<f64>()
            * h
            * h;
        assert!((total - 1.0).abs() <= 1e-10);
    }

    #[test]
    fn identity_interval_and_sphere() {
        let model = Arc::new(init_params(&Arch::zmlp(), 0));
        let flow = FlowConfig::default();
        for (_, d) in interval_density(&model, 11, &flow).unwrap() {
            assert!((d - 0.5).abs() <= 1e-12);
        }
        let rows = sphere_grid(&model, 16, &flow).unwrap();
        assert!((sphere_grid_integral(&rows, 16) - 1.0).abs() <= 1e-2);
        assert!(interval_density(&Arc::new(init_params(&Arch::deepset(2), 0)), 11, &flow).is_err());
    }

    #[test]
    fn ppm_layout() {
        let img = heatmap_ppm(&[1.0, 0.5, 1e-9, 0.0, f64::NAN, 2.0], 3, 2);
        let header = b"P6\n3 2\n255\n";
        assert_eq!(&img[..header.len()], header);
        assert_eq!(img.len(), header.len() + 18);
        assert_eq!(&img[header.len() + 15..], &VIRIDIS[255]);
        assert_eq!(VIRIDIS[0], [68, 1, 84]);
        assert_eq!(VIRIDIS[255], [253, 231, 37]);
    }

    #[test]
    fn samples_have_expected_shape_and_are_seeded() {
        let model = Arc::new(init_params(&Arch::deepset(3), 2));
        let flow = FlowConfig::default();
        let (h, a) = sample_rows(&model, 3, 7, &flow).unwrap();
        let (_, b) = sample_rows(&model, 3, 7, &flow).unwrap();
        assert_eq!(h.len(), 19);
        assert_eq!(a, b);
        let text = csv_text(&h.iter().map(String::as_str).collect::<Vec<_>>(), &a);
        assert_eq!(text.lines().count(), 4);
    }
}
