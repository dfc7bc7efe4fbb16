//! Experiment configuration files.
//!
//! Configs are TOML, dialect version 1:
//!
//! ```toml
//! version = 1
//! dtype = "f32"            # or "f64"
//!
//! [data]                   # exactly one of `path` or `synthetic`
//! path = "interactions.tsv"
//!
//! [train]                  # every field except the sections below has a default
//! objective = "nce"
//! max_epochs = 30
//!
//! [train.sampler]
//! kind = "genni"
//! alpha = 2.0
//!
//! [train.encoder]
//! dim = 32
//!
//! [sweep]                  # optional axes; the run set is their cross product
//! alpha = [0.0, 1.0, 2.0]
//! seed = [0, 1]
//!
//! [diagnostics]            # optional per-epoch informative-negative dumps
//! probe_users = 3
//! top_n = 10
//! ```
//!
//! Unknown keys are rejected. `data` and `train` are required.

use std::path::{Path, PathBuf};

use genni_core::synthetic::SyntheticSpec;
use genni_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const CONFIG_VERSION: u32 = 1;

/// Sweeps larger than this need an explicit override.
pub const MAX_SWEEP_RUNS: usize = 10_000;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    #[default]
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataSource {
    /// Interaction TSV; relative paths resolve against the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synthetic: Option<SyntheticSpec>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sweep {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub alpha: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub beta: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub gamma: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub k: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub seed: Vec<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Diagnostics {
    #[serde(default = "default_probe_users")]
    pub probe_users: usize,
    #[serde(default = "default_top_n")]
    pub top_n: usize,
}

fn default_probe_users() -> usize {
    3
}

fn default_top_n() -> usize {
    10
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    #[serde(default)]
    pub dtype: Precision,
    /// Output directory, used when `--out` is not given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<PathBuf>,
    pub data: DataSource,
    pub train: TrainConfig,
    #[serde(default)]
    pub sweep: Sweep,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostics: Option<Diagnostics>,
}

/// One point of the sweep cross product.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub index: usize,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub k: usize,
    pub seed: u64,
}

impl Cell {
    pub fn name(&self) -> String {
        format!("run-{:04}", self.index)
    }

    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.sampler.alpha = self.alpha;
        cfg.sampler.beta = self.beta;
        cfg.sampler.gamma = self.gamma;
        cfg.sampler.k = self.k;
        cfg.seed = self.seed;
        cfg
    }
}

fn axis<T: Copy>(values: &[T], base: T) -> Vec<T> {
    if values.is_empty() {
        vec![base]
    } else {
        values.to_vec()
    }
}

impl Sweep {
    pub fn size(&self) -> usize {
        [self.alpha.len(), self.beta.len(), self.gamma.len(), self.k.len(), self.seed.len()]
            .iter()
            .map(|&n| n.max(1))
            .fold(1usize, |acc, n| acc.saturating_mul(n))
    }

    /// Cross product in axis order alpha, beta, gamma, k, seed (seed fastest).
    pub fn cells(&self, base: &TrainConfig) -> Vec<Cell> {
        let s = &base.sampler;
        let mut out = Vec::with_capacity(self.size());
        for &alpha in &axis(&self.alpha, s.alpha) {
            for &beta in &axis(&self.beta, s.beta) {
                for &gamma in &axis(&self.gamma, s.gamma) {
                    for &k in &axis(&self.k, s.k) {
                        for &seed in &axis(&self.seed, base.seed) {
                            out.push(Cell {
                                index: out.len(),
                                alpha,
                                beta,
                                gamma,
                                k,
                                seed,
                            });
                        }
                    }
                }
            }
        }
        out
    }

    /// Names of the axes with more than one value.
    pub fn varying(&self) -> Vec<&'static str> {
        let lens = [
            ("alpha", self.alpha.len()),
            ("beta", self.beta.len()),
            ("gamma", self.gamma.len()),
            ("k", self.k.len()),
            ("seed", self.seed.len()),
        ];
        lens.iter().filter(|(_, n)| *n > 1).map(|(name, _)| *name).collect()
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> CliResult<()> {
        if self.version != CONFIG_VERSION {
            return Err(CliError::Config(format!(
                "unsupported config version {} (expected {CONFIG_VERSION})",
                self.version
            )));
        }
        match (&self.data.path, &self.data.synthetic) {
            (Some(_), None) => {}
            (None, Some(spec)) => spec.validate()?,
            _ => {
                return Err(CliError::Config(
                    "[data] needs exactly one of `path` or `synthetic`".into(),
                ))
            }
        }
        self.train.validate()?;
        for cell in self.sweep.cells(&self.train).iter().take(1) {
            cell.apply(&self.train).validate()?;
        }
        let s = &self.sweep;
        if s.k.contains(&0) || s.alpha.iter().chain(&s.gamma).any(|&a| !(a >= 0.0) || !a.is_finite()) {
            return Err(CliError::Config("sweep: k must be >= 1 and alpha, gamma finite and >= 0".into()));
        }
        if s.beta.iter().any(|&b| !(b > 0.0 && b <= 1.0)) {
            return Err(CliError::Config("sweep: beta values must lie in (0, 1]".into()));
        }
        if self.diagnostics.as_ref().is_some_and(|d| d.top_n == 0) {
            return Err(CliError::Config("diagnostics: top_n must be >= 1".into()));
        }
        Ok(())
    }

    /// The config as TOML, as recorded in run manifests.
    pub fn to_toml(&self) -> CliResult<String> {
        toml::to_string(self).map_err(|e| CliError::Config(format!("cannot serialize config: {e}")))
    }
}

/// Parses and validates config text. `origin` names the source in messages.
pub fn parse_config(text: &str, origin: &str) -> CliResult<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| CliError::Config(format!("{origin}: {e}")))?;
    cfg.validate().map_err(|e| match e {
        CliError::Config(m) => CliError::Config(format!("{origin}: {m}")),
        CliError::Core(genni_core::Error::Usage(m)) => CliError::Config(format!("{origin}: {m}")),
        other => other,
    })?;
    Ok(cfg)
}

/// Reads a config file and resolves its data path against the file's
/// directory.
pub fn load_config(path: &Path) -> CliResult<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let mut cfg = parse_config(&text, &path.display().to_string())?;
    if let Some(p) = cfg.data.path.as_mut() {
        if p.is_relative() {
            if let Some(dir) = path.parent() {
                *p = dir.join(&*p);
            }
        }
    }
    Ok(cfg)
}
