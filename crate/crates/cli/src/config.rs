//! Run configuration files.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use lazymaps::greedy::{GreedyConfig, LayerSettings};
use lazymaps::linalg::SymmetricMatrix;
use lazymaps::mcmc::McmcConfig;
use lazymaps::optimizer::OptimizerConfig;
use lazymaps::targets::{
    banana_target, gaussian_target, simulate_beam_data, simulate_log_cox_data, BeamData,
    BeamGeometry, BeamTarget, LogCoxData, LogCoxParams, LogCoxTarget, DEFAULT_N_ELEMENTS, PAPER_E_TRUE_GPA,
};
use lazymaps::TargetDensity;
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::UsageError;

pub const SCHEMA_VERSION: u32 = 1;

fn default_patience() -> usize {
    3
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("out")
}

fn default_grid_n() -> usize {
    16
}

fn default_n_obs() -> usize {
    30
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum TargetSpec {
    /// `N(mean, covariance)`, identity covariance when omitted.
    GaussianShift {
        mean: Vec<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        covariance: Option<Vec<Vec<f64>>>,
    },
    Banana {
        #[serde(default)]
        rotation_seed: Option<u64>,
    },
    /// Observations from `data`, or simulated from `e_true_gpa` with
    /// `simulate_seed`.
    Beam {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<PathBuf>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        simulate_seed: Option<u64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        e_true_gpa: Option<Vec<f64>>,
    },
    LogCox {
        #[serde(default, skip_serializing_if = "Option::is_none")]
        data: Option<PathBuf>,
        #[serde(default = "default_grid_n")]
        grid_n: usize,
        #[serde(default = "default_n_obs")]
        n_obs: usize,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        simulate_seed: Option<u64>,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GreedySection {
    pub eps: f64,
    pub ell_max: usize,
    pub schedule: Vec<LayerSettings>,
    #[serde(default)]
    pub optimizer: OptimizerConfig,
    #[serde(default = "default_patience")]
    pub stagnation_patience: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    pub target: TargetSpec,
    pub greedy: GreedySection,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mcmc: Option<McmcConfig>,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
}

impl RunConfig {
    pub fn greedy_config(&self) -> GreedyConfig {
        GreedyConfig {
            eps: self.greedy.eps,
            ell_max: self.greedy.ell_max,
            schedule: self.greedy.schedule.clone(),
            optimizer: self.greedy.optimizer.clone(),
            seed: self.seed,
            stagnation_patience: self.greedy.stagnation_patience,
        }
    }

    /// Makes relative data paths absolute with respect to `base`. The output
    /// directory stays relative to the working directory.
    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        match &mut self.target {
            TargetSpec::Beam { data: Some(p), .. } | TargetSpec::LogCox { data: Some(p), .. } => fix(p),
            _ => {}
        }
    }

    /// Checks the schema version, referenced files, the schedule against the
    /// target dimension and the sampler settings. Builds the target.
    pub fn validate(&self) -> anyhow::Result<Box<dyn TargetDensity>> {
        if self.schema_version != SCHEMA_VERSION {
            bail!(UsageError(format!(
                "unsupported schema_version {} (expected {SCHEMA_VERSION})",
                self.schema_version
            )));
        }
        if let TargetSpec::Beam { data: Some(p), .. } | TargetSpec::LogCox { data: Some(p), .. } = &self.target {
            if !p.is_file() {
                bail!(UsageError(format!("target data file {} does not exist", p.display())));
            }
        }
        let target = build_target(&self.target).map_err(|e| UsageError(format!("target: {e:#}")))?;
        self.greedy_config()
            .validate(target.dim())
            .map_err(|e| UsageError(format!("greedy: {e}")))?;
        if let Some(m) = &self.mcmc {
            m.validate().map_err(|e| UsageError(format!("mcmc: {e}")))?;
        }
        Ok(target)
    }
}

/// Reads and parses a config file. Parse errors carry the line and column.
pub fn load(path: &Path) -> anyhow::Result<RunConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| UsageError(format!("cannot read config file {}: {e}", path.display())))?;
    let mut cfg: RunConfig = serde_json::from_str(&text)
        .map_err(|e| UsageError(format!("{}:{}:{}: {e}", path.display(), e.line(), e.column())))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    cfg.resolve_paths(&base);
    Ok(cfg)
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> anyhow::Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

pub fn beam_data(data: &Option<PathBuf>, seed: Option<u64>, e_true: &Option<Vec<f64>>) -> anyhow::Result<BeamData> {
    if let Some(p) = data {
        return read_json(p);
    }
    let e = e_true.clone().unwrap_or_else(|| PAPER_E_TRUE_GPA.to_vec());
    let Some(seed) = seed else {
        bail!("beam target needs either `data` or `simulate_seed`");
    };
    Ok(simulate_beam_data(&e, Some(seed), DEFAULT_N_ELEMENTS, &BeamGeometry::default())?)
}

pub fn log_cox_data(data: &Option<PathBuf>, grid_n: usize, n_obs: usize, seed: Option<u64>) -> anyhow::Result<LogCoxData> {
    if let Some(p) = data {
        return read_json(p);
    }
    let Some(seed) = seed else {
        bail!("log-cox target needs either `data` or `simulate_seed`");
    };
    Ok(simulate_log_cox_data(LogCoxParams::reference_values(grid_n), n_obs, seed)?)
}

pub fn build_target(spec: &TargetSpec) -> anyhow::Result<Box<dyn TargetDensity>> {
    Ok(match spec {
        TargetSpec::GaussianShift { mean, covariance } => {
            let d = mean.len();
            if d == 0 {
                bail!("gaussian-shift mean must not be empty");
            }
            let cov = match covariance {
                None => DMatrix::identity(d, d),
                Some(rows) => {
                    if rows.len() != d || rows.iter().any(|r| r.len() != d) {
                        bail!("covariance must be {d}×{d}");
                    }
                    DMatrix::from_fn(d, d, |i, j| rows[i][j])
                }
            };
            Box::new(gaussian_target(DVector::from_vec(mean.clone()), &SymmetricMatrix::new(cov)?)?)
        }
        TargetSpec::Banana { rotation_seed } => Box::new(banana_target(*rotation_seed)),
        TargetSpec::Beam { data, simulate_seed, e_true_gpa } => {
            Box::new(BeamTarget::from_data(&beam_data(data, *simulate_seed, e_true_gpa)?)?)
        }
        TargetSpec::LogCox { data, grid_n, n_obs, simulate_seed } => {
            Box::new(LogCoxTarget::from_data(&log_cox_data(data, *grid_n, *n_obs, *simulate_seed)?)?)
        }
    })
}

pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "gaussian-shift" => Some(include_str!("../../../configs/gaussian-shift.json")),
        "banana" => Some(include_str!("../../../configs/banana.json")),
        "beam" => Some(include_str!("../../../configs/beam.json")),
        "log-cox" => Some(include_str!("../../../configs/log-cox.json")),
        _ => None,
    }
}

pub const BUILTIN_NAMES: [&str; 4] = ["gaussian-shift", "banana", "beam", "log-cox"];

pub fn load_builtin(name: &str) -> anyhow::Result<RunConfig> {
    let text = builtin(name).ok_or_else(|| {
        UsageError(format!("unknown builtin config `{name}`; valid names: {}", BUILTIN_NAMES.join(", ")))
    })?;
    let mut cfg: RunConfig = serde_json::from_str(text).context("builtin config")?;
    let cwd = std::env::current_dir()?;
    cfg.resolve_paths(&cwd);
    Ok(cfg)
}
