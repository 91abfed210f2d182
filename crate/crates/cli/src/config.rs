//! Flat `key = value` run configuration.

use std::fmt;
use std::path::{Path, PathBuf};

use equiflow::flow::FlowConfig;
use equiflow::potentials::Arch;
use equiflow::targets::{BandTarget, ToyCoeffs};
use equiflow::train::{Paradigm, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifoldKind {
    Sphere,
    Su2,
    Su3,
}

impl ManifoldKind {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "sphere" | "s2" => Some(Self::Sphere),
            "su2" => Some(Self::Su2),
            "su3" => Some(Self::Su3),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Sphere => "sphere",
            Self::Su2 => "su2",
            Self::Su3 => "su3",
        }
    }

    pub fn sun_dim(self) -> Option<usize> {
        match self {
            Self::Sphere => None,
            Self::Su2 => Some(2),
            Self::Su3 => Some(3),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TargetSpec {
    Toy { c: [f64; 3], beta: f64 },
    Band(Vec<(f64, f64, f64)>),
    Data(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub manifold: ManifoldKind,
    pub target: TargetSpec,
    pub train: TrainConfig,
    pub width: usize,
    /// Fixed number of band samples to train on; zero draws fresh ones.
    pub dataset_size: usize,
    /// Passes over a finite dataset; replaces `iterations` when set.
    pub epochs: Option<usize>,
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfigError(pub String);

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for ConfigError {}

fn err<T>(msg: impl Into<String>) -> Result<T, ConfigError> {
    Err(ConfigError(msg.into()))
}

pub const PRESETS: [&str; 4] = ["su2-set3", "su3-set3", "sphere-band", "paper"];

impl Default for RunConfig {
    fn default() -> Self {
        Self::preset("su2-set3").expect("built-in preset")
    }
}

impl RunConfig {
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        let toy3 = TargetSpec::Toy { c: [1.0, 0.0, 0.0], beta: 9.0 };
        let base = |manifold, target| RunConfig {
            manifold,
            target,
            train: TrainConfig::default(),
            width: 32,
            dataset_size: 0,
            epochs: None,
            out: PathBuf::from("out"),
        };
        match name {
            "su2-set3" => Ok(base(ManifoldKind::Su2, toy3)),
            "su3-set3" => Ok(base(ManifoldKind::Su3, toy3)),
            "paper" => {
                let mut c = base(ManifoldKind::Su2, toy3);
                c.train.batch = 8192;
                Ok(c)
            }
            "sphere-band" => {
                let mut c = base(ManifoldKind::Sphere, TargetSpec::Band(BandTarget::default().components().to_vec()));
                c.train.paradigm = Paradigm::Nll;
                c.train.batch = 200;
                c.train.lr = 0.001;
                c.train.lr_milestones = Vec::new();
                c.dataset_size = 10_000;
                c.epochs = Some(100);
                Ok(c)
            }
            _ => err(format!("unknown preset {name:?} (known: {})", PRESETS.join(", "))),
        }
    }

    /// Apply `key = value` lines on top of `self`.
    pub fn apply_text(mut self, text: &str) -> Result<Self, ConfigError> {
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return err(format!("line {}: expected key = value", lineno + 1));
            };
            self.set(key.trim(), value.trim()).map_err(|e| ConfigError(format!("line {}: {e}", lineno + 1)))?;
        }
        Ok(self)
    }

    pub fn from_file(base: Self, path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError(format!("{}: {e}", path.display())))?;
        base.apply_text(&text)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "manifold" => {
                self.manifold = ManifoldKind::parse(value).ok_or_else(|| ConfigError(format!("unknown manifold {value:?}")))?;
            }
            "target" => {
                self.target = match value {
                    "toy" => TargetSpec::Toy { c: [1.0, 0.0, 0.0], beta: 9.0 },
                    "band" => TargetSpec::Band(BandTarget::default().components().to_vec()),
                    _ => return err(format!("unknown target {value:?} (toy, band; or set data = PATH)")),
                };
            }
            "toy_set" => {
                let i: usize = num(key, value)?;
                let t = ToyCoeffs::set(i, 2).map_err(|e| ConfigError(e.to_string()))?;
                self.target = TargetSpec::Toy { c: t.c, beta: t.beta };
            }
            "toy_c" => {
                let v = list::<f64>(key, value)?;
                let c: [f64; 3] = v.try_into().map_err(|_| ConfigError("toy_c needs three values".into()))?;
                let beta = match self.target {
                    TargetSpec::Toy { beta, .. } => beta,
                    _ => 9.0,
                };
                self.target = TargetSpec::Toy { c, beta };
            }
            "beta" => {
                let beta: f64 = num(key, value)?;
                let c = match self.target {
                    TargetSpec::Toy { c, .. } => c,
                    _ => return err("beta applies to the toy target; set target = toy first"),
                };
                self.target = TargetSpec::Toy { c, beta };
            }
            "band" => {
                let mut comps = Vec::new();
                for part in value.split(';').map(str::trim).filter(|s| !s.is_empty()) {
                    let v = part.split(':').map(|x| num::<f64>(key, x.trim())).collect::<Result<Vec<_>, _>>()?;
                    let [z, s, w]: [f64; 3] = v.try_into().map_err(|_| ConfigError(format!("band component {part:?}: need z0:sigma:weight")))?;
                    comps.push((z, s, w));
                }
                BandTarget::new(comps.clone()).map_err(|e| ConfigError(e.to_string()))?;
                self.target = TargetSpec::Band(comps);
            }
            "data" => self.target = TargetSpec::Data(PathBuf::from(value)),
            "paradigm" => {
                self.train.paradigm = match value {
                    "reverse_kl" => Paradigm::ReverseKl,
                    "nll" => Paradigm::Nll,
                    _ => return err(format!("unknown paradigm {value:?} (reverse_kl, nll)")),
                };
            }
            "batch" => self.train.batch = num(key, value)?,
            "iterations" => self.train.iterations = num(key, value)?,
            "lr" => self.train.lr = num(key, value)?,
            "weight_decay" => self.train.weight_decay = num(key, value)?,
            "lr_milestones" => self.train.lr_milestones = list(key, value)?,
            "lr_factor" => self.train.lr_factor = num(key, value)?,
            "seed" => self.train.seed = num(key, value)?,
            "steps" => self.train.flow.steps = num(key, value)?,
            "t_final" => self.train.flow.t_final = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "dataset_size" => self.dataset_size = num(key, value)?,
            "epochs" => self.epochs = Some(num(key, value)?),
            "out" => self.out = PathBuf::from(value),
            _ => return err(format!("unknown key {key:?}")),
        }
        Ok(())
    }

    pub fn flow(&self) -> FlowConfig {
        self.train.flow
    }

    pub fn arch(&self) -> Arch {
        match self.manifold.sun_dim() {
            Some(n) => Arch::deepset_width(n, self.width),
            None => Arch::zmlp(),
        }
    }

    /// Toy target coefficients when the manifold is SU(n).
    pub fn toy(&self) -> Result<Option<ToyCoeffs>, ConfigError> {
        match (&self.target, self.manifold.sun_dim()) {
            (TargetSpec::Toy { c, beta }, Some(n)) => ToyCoeffs::new(*c, *beta, n).map(Some).map_err(|e| ConfigError(e.to_string())),
            _ => Ok(None),
        }
    }

    /// Cross-field consistency.
    pub fn validate(&self) -> Result<(), ConfigError> {
        self.train.validate().map_err(|e| ConfigError(e.to_string()))?;
        self.train.flow.validate().map_err(|e| ConfigError(e.to_string()))?;
        if self.width == 0 {
            return err("width must be at least 1");
        }
        match (&self.target, self.manifold) {
            (TargetSpec::Toy { .. }, ManifoldKind::Sphere) => err("the toy target lives on su2/su3"),
            (TargetSpec::Band(_) | TargetSpec::Data(_), ManifoldKind::Su2 | ManifoldKind::Su3) => {
                err("band and data targets live on the sphere")
            }
            (TargetSpec::Toy { .. }, _) if self.train.paradigm == Paradigm::Nll => err("the toy target has no sampler; use reverse_kl"),
            (TargetSpec::Data(_), _) if self.train.paradigm == Paradigm::ReverseKl => err("a dataset has no density; use nll"),
            _ => {
                self.toy()?;
                Ok(())
            }
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError(format!("{key}: cannot parse {value:?}")))
}

fn list<T: std::str::FromStr>(key: &str, value: &str) -> Result<Vec<T>, ConfigError> {
    value.split(',').map(str::trim).filter(|s| !s.is_empty()).map(|s| num(key, s)).collect()
}
