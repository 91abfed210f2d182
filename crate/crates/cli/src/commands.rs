//! Subcommand implementations.

use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use equiflow::checks::{run_suite, Models, Suite};
use equiflow::export::{csv_text, heatmap_ppm, interval_density, sample_rows, sphere_grid, sphere_grid_integral, su2_grid, su3_grid, trapezoid};
use equiflow::potentials::{deserialize_params, init_params, serialize_params, Model};
use equiflow::targets::{band_sample, load_impacts_csv, toy_log_normalizer, BandTarget, ToyCoeffs};
use equiflow::train::{metrics_csv, smoothed_losses, train, Problem, TrainError, METRICS_HEADER};

use crate::config::{ManifoldKind, RunConfig, TargetSpec};

/// Failure classes with stable exit codes.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) => 3,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) => CliError::Usage(e.to_string()),
            _ => CliError::Runtime(e.to_string()),
        }
    }
}

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub resolution: Option<usize>,
    pub count: Option<usize>,
    pub preset: Option<String>,
}

impl Options {
    fn explicit_config(&self) -> bool {
        self.config.is_some() || self.preset.is_some()
    }

    /// Preset, then config file, then command-line overrides.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let base = match &self.preset {
            Some(p) => RunConfig::preset(p),
            None => Ok(RunConfig::default()),
        }
        .map_err(|e| CliError::Usage(e.to_string()))?;
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_file(base, path),
            None => Ok(base),
        }
        .map_err(|e| CliError::Usage(e.to_string()))?;
        if let Some(s) = self.seed {
            cfg.train.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }

    fn load_checkpoint(&self) -> Result<Arc<Model>, CliError> {
        let path = self.checkpoint.as_ref().ok_or_else(|| CliError::Usage("--checkpoint is required".into()))?;
        read_checkpoint(path).map(Arc::new)
    }
}

pub fn read_checkpoint(path: &Path) -> Result<Model, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
    deserialize_params(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn manifold_of(model: &Model) -> ManifoldKind {
    match model {
        Model::Sun(d) if d.n == 2 => ManifoldKind::Su2,
        Model::Sun(_) => ManifoldKind::Su3,
        Model::Sphere(_) => ManifoldKind::Sphere,
    }
}

fn prepare_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Usage(format!("cannot create {}: {e}", dir.display())))?;
    let probe = dir.join(".equiflow-write-test");
    fs::write(&probe, b"").map_err(|e| CliError::Usage(format!("{} is not writable: {e}", dir.display())))?;
    let _ = fs::remove_file(probe);
    Ok(())
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

fn usage(e: impl fmt::Display) -> CliError {
    CliError::Usage(e.to_string())
}

fn runtime(e: impl fmt::Display) -> CliError {
    CliError::Runtime(e.to_string())
}

pub fn cmd_train(opts: &Options) -> Result<(), CliError> {
    let mut cfg = opts.run_config()?;
    cfg.validate().map_err(usage)?;
    prepare_out(&cfg.out)?;
    write(&cfg.out.join("metrics.csv"), format!("{METRICS_HEADER}\n"))?;

    let init = match &opts.checkpoint {
        Some(path) => {
            let m = read_checkpoint(path)?;
            if m.arch() != cfg.arch() {
                return Err(CliError::Usage(format!("{} does not match the configured model", path.display())));
            }
            m
        }
        None => init_params(&cfg.arch(), cfg.train.seed),
    };

    let problem = match &cfg.target {
        TargetSpec::Toy { .. } => Problem::Toy(cfg.toy().map_err(usage)?.expect("toy target on SU(n)")),
        TargetSpec::Band(comps) => {
            let bt = BandTarget::new(comps.clone()).map_err(usage)?;
            if cfg.dataset_size > 0 {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x5eed_da7a);
                let pts = (0..cfg.dataset_size).map(|_| band_sample(&bt, &mut rng)).collect::<Result<Vec<_>, _>>().map_err(runtime)?;
                Problem::Data(pts)
            } else {
                Problem::Band(bt)
            }
        }
        TargetSpec::Data(path) => {
            let data = load_impacts_csv(path).map_err(usage)?;
            for (row, reason) in &data.rejected {
                eprintln!("warning: {}: row {row} skipped: {reason}", path.display());
            }
            eprintln!("loaded {} points ({} rows skipped)", data.points.len(), data.rejected.len());
            Problem::Data(data.points)
        }
    };
    if let (Some(epochs), Problem::Data(pts)) = (cfg.epochs, &problem) {
        cfg.train.iterations = (epochs * pts.len()).div_ceil(cfg.train.batch);
    }

    let total = cfg.train.iterations;
    let report = train(&cfg.train, &problem, init, |row| {
        if row.iter % 10 == 0 || row.iter + 1 == total {
            eprintln!("iter {:>5}  loss {:>12.6}  |g| {:>10.3e}  lr {:.1e}  {:>8.1}s", row.iter, row.loss, row.grad_norm, row.lr, row.seconds);
        }
    })?;
    for w in &report.warnings {
        eprintln!("warning: {w}");
    }
    write(&cfg.out.join("final.ckpt"), serialize_params(&report.final_model))?;
    write(&cfg.out.join("best.ckpt"), serialize_params(&report.best_model))?;
    write(&cfg.out.join("metrics.csv"), metrics_csv(&report.metrics))?;

    if let Some(&last) = smoothed_losses(&report.metrics).last() {
        println!("final smoothed loss {last:.6}");
        if let Problem::Toy(c) = &problem {
            let log_z = toy_log_normalizer(c, if c.n == 2 { 2001 } else { 256 }).map_err(runtime)?;
            println!("normalized KL estimate {:.6}", last + log_z);
        }
    }
    match report.aborted {
        Some(reason) => Err(CliError::Runtime(format!("training aborted: {reason}"))),
        None => Ok(()),
    }
}

pub fn cmd_grid(opts: &Options) -> Result<(), CliError> {
    let model = opts.load_checkpoint()?;
    let kind = manifold_of(&model);
    let cfg = opts.run_config()?;
    if opts.explicit_config() && cfg.manifold != kind {
        return Err(CliError::Usage(format!("checkpoint is {} but the configuration says {}", kind.name(), cfg.manifold.name())));
    }
    prepare_out(&cfg.out)?;
    let flow = cfg.flow();
    let csv_path = cfg.out.join("grid.csv");
    let ppm_path = cfg.out.join("grid.ppm");
    let mass = match kind {
        ManifoldKind::Su2 => {
            let res = opts.resolution.unwrap_or(512);
            let toy = match (opts.explicit_config(), &cfg.target) {
                (true, TargetSpec::Toy { c, beta }) => ToyCoeffs::new(*c, *beta, 2),
                _ => ToyCoeffs::set(3, 2),
            }
            .map_err(usage)?;
            let log_z = toy_log_normalizer(&toy, 2001).map_err(runtime)?;
            let rows = su2_grid(&model, Some((&toy, log_z)), res, &flow)?;
            let table: Vec<[f64; 3]> = rows.iter().map(|r| [r.theta, r.model, r.target.unwrap_or(f64::NAN)]).collect();
            write(&csv_path, csv_text(&["theta", "model_density", "target_density"], &table))?;
            let height = (res / 8).max(1);
            let strip: Vec<f64> = (0..height).flat_map(|_| rows.iter().map(|r| r.model)).collect();
            write(&ppm_path, heatmap_ppm(&strip, res, height))?;
            let xs: Vec<f64> = rows.iter().map(|r| r.theta).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r.model).collect();
            trapezoid(&xs, &ys)
        }
        ManifoldKind::Su3 => {
            let res = opts.resolution.unwrap_or(128);
            let rows = su3_grid(&model, res, &flow)?;
            write(&csv_path, csv_text(&["theta1", "theta2", "model_density"], &rows))?;
            let vals: Vec<f64> = rows.iter().map(|r| r[2]).collect();
            write(&ppm_path, heatmap_ppm(&vals, res, res))?;
            let cell = (2.0 * PI / res as f64).powi(2);
            vals.iter().sum::<f64>() * cell
        }
        ManifoldKind::Sphere => {
            let res = opts.resolution.unwrap_or(128);
            let rows = sphere_grid(&model, res, &flow)?;
            write(&csv_path, csv_text(&["lat", "lon", "model_density"], &rows))?;
            let vals: Vec<f64> = rows.iter().map(|r| r[2]).collect();
            write(&ppm_path, heatmap_ppm(&vals, res, res))?;
            sphere_grid_integral(&rows, res)
        }
    };
    println!("wrote {} and {}; grid integral {mass:.6}", csv_path.display(), ppm_path.display());
    Ok(())
}

pub fn cmd_sample(opts: &Options) -> Result<(), CliError> {
    let model = opts.load_checkpoint()?;
    let cfg = opts.run_config()?;
    prepare_out(&cfg.out)?;
    let count = opts.count.unwrap_or(1000);
    let (header, rows) = sample_rows(&model, count, cfg.train.seed, &cfg.flow())?;
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let path = cfg.out.join("samples.csv");
    write(&path, csv_text(&header, &rows))?;
    println!("wrote {count} samples to {}", path.display());
    Ok(())
}

pub fn cmd_interval(opts: &Options) -> Result<(), CliError> {
    let model = opts.load_checkpoint()?;
    if manifold_of(&model) != ManifoldKind::Sphere {
        return Err(CliError::Usage("interval export needs a sphere checkpoint".into()));
    }
    let cfg = opts.run_config()?;
    prepare_out(&cfg.out)?;
    let rows = interval_density(&model, opts.resolution.unwrap_or(2001), &cfg.flow())?;
    let (zs, ds): (Vec<f64>, Vec<f64>) = rows.iter().copied().unzip();
    let table: Vec<[f64; 2]> = rows.iter().map(|&(z, d)| [z, d]).collect();
    let path = cfg.out.join("interval.csv");
    write(&path, csv_text(&["z", "density"], &table))?;
    println!("wrote {}; integral over z {:.6}", path.display(), trapezoid(&zs, &ds));
    Ok(())
}

/// Runs a property suite; failing checks give a runtime error after the
/// table is printed.
pub fn cmd_check(opts: &Options, suite: Suite) -> Result<(), CliError> {
    let seed = opts.seed.unwrap_or(0);
    let mut models = Models::random(seed);
    if opts.checkpoint.is_some() {
        let m = opts.load_checkpoint()?;
        match manifold_of(&m) {
            ManifoldKind::Su2 => models.su2 = m,
            ManifoldKind::Su3 => models.su3 = m,
            ManifoldKind::Sphere => models.sphere = m,
        }
    }
    let results = run_suite(suite, &models, seed)?;
    for r in &results {
        println!("{r}");
    }
    let failed = results.iter().filter(|r| !r.passed()).count();
    println!("{} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        return Err(CliError::Runtime(format!("{failed} check(s) failed")));
    }
    Ok(())
}
