//! Experiment configuration: JSON with a schema version, unknown keys rejected.

use hps_core::model::{check_target_ratio, NoiseLaw};
use hps_core::CovarianceSpec;
use nalgebra::DVector;
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}:{line}:{column}: {message}")]
    Parse { path: String, line: usize, column: usize, message: String },
    #[error("{path}:{line}: field `{field}`: {message}")]
    Invalid { path: String, line: usize, field: String, message: String },
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    VarianceCovshift,
    ModelShift,
    CombinedShift,
    Baselines,
    Multitask,
    Progressive,
    Regimes,
}

/// A scalar or a list of scalars.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum OneOrMany<T> {
    One(T),
    Many(Vec<T>),
}

impl<T: Clone> OneOrMany<T> {
    pub fn to_vec(&self) -> Vec<T> {
        match self {
            OneOrMany::One(x) => vec![x.clone()],
            OneOrMany::Many(v) => v.clone(),
        }
    }
}

/// Eigenvalues of a population covariance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum SpectrumConfig {
    #[default]
    Identity,
    /// First half of the eigenvalues `high`, the rest `low`.
    Paired {
        high: f64,
        low: f64,
    },
    Diagonal {
        values: Vec<f64>,
    },
}

impl SpectrumConfig {
    pub fn covariance(&self, p: usize) -> Result<CovarianceSpec, String> {
        match self {
            SpectrumConfig::Identity => Ok(CovarianceSpec::identity(p)),
            SpectrumConfig::Paired { high, low } => CovarianceSpec::paired(p, *high, *low).map_err(|e| e.to_string()),
            SpectrumConfig::Diagonal { values } => {
                if values.len() != p {
                    return Err(format!("expected {p} eigenvalues, found {}", values.len()));
                }
                CovarianceSpec::diagonal(DVector::from_vec(values.clone())).map_err(|e| e.to_string())
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RatioKeyword {
    /// Choose the ratio by minimising the training objective.
    Fit,
}

/// Output-layer ratio: a fixed value or fitted per replicate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RatioChoice {
    Value(f64),
    Keyword(RatioKeyword),
}

impl Default for RatioChoice {
    fn default() -> Self {
        RatioChoice::Value(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TauKeyword {
    /// Validation risk of target-only OLS.
    Ols,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum TauChoice {
    Value(f64),
    Keyword(TauKeyword),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RiskMode {
    /// Bias plus variance with the noise integrated out.
    #[default]
    Decomposed,
    /// Excess risk of the fitted coefficients.
    Realized,
}

fn default_sigma() -> f64 {
    0.5
}
fn default_one() -> f64 {
    1.0
}
fn default_replicates() -> usize {
    100
}
fn default_patience() -> usize {
    1
}
fn default_slack() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub experiment: ExperimentKind,
    pub p: usize,
    /// Source sample sizes (grid), or the source pool for progressive runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n1: Option<OneOrMany<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n2: Option<usize>,
    /// Shared sample size for multi-task runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub t: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub r: Option<OneOrMany<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mu: Option<OneOrMany<f64>>,
    #[serde(default = "default_sigma")]
    pub sigma: f64,
    #[serde(default = "default_one")]
    pub beta0_norm: f64,
    #[serde(default)]
    pub source_spectrum: SpectrumConfig,
    #[serde(default)]
    pub target_spectrum: SpectrumConfig,
    #[serde(default)]
    pub a: RatioChoice,
    #[serde(default)]
    pub risk: RiskMode,
    #[serde(default = "default_replicates")]
    pub replicates: usize,
    #[serde(default)]
    pub master_seed: u64,
    #[serde(default)]
    pub noise_law: NoiseLaw,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub batches: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tau: Option<TauChoice>,
    #[serde(default = "default_patience")]
    pub patience: usize,
    /// Target validation rows for progressive runs (defaults to `n2`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub n_val: Option<usize>,
    /// Target tasks need `n >= (1 + dimension_slack) p`.
    #[serde(default = "default_slack")]
    pub dimension_slack: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<PathBuf>,
}

/// Loaded configuration together with its source text, for error locations.
#[derive(Debug, Clone)]
pub struct LoadedConfig {
    pub config: ExperimentConfig,
    pub path: String,
    source: String,
}

impl LoadedConfig {
    pub fn from_str(text: &str, path: &str) -> Result<Self, ConfigError> {
        let config: ExperimentConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: path.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        Ok(LoadedConfig { config, path: path.to_string(), source: text.to_string() })
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
        Self::from_str(&text, &path.display().to_string())
    }

    /// Error for `field`, anchored at the line where the key appears (line 1 when absent).
    pub fn invalid(&self, field: &str, message: impl Into<String>) -> ConfigError {
        let needle = format!("\"{field}\"");
        let line = self.source.lines().position(|l| l.contains(&needle)).map(|i| i + 1).unwrap_or(1);
        ConfigError::Invalid { path: self.path.clone(), line, field: field.to_string(), message: message.into() }
    }

    fn require<T: Clone>(&self, value: &Option<T>, field: &str) -> Result<T, ConfigError> {
        value.clone().ok_or_else(|| self.invalid(field, format!("required for experiment `{}`", kind_name(self.config.experiment))))
    }

    pub fn n1_grid(&self) -> Result<Vec<usize>, ConfigError> {
        let v = self.require(&self.config.n1, "n1")?.to_vec();
        if v.is_empty() || v.contains(&0) {
            return Err(self.invalid("n1", "source sizes must be positive and non-empty"));
        }
        Ok(v)
    }

    pub fn n2(&self) -> Result<usize, ConfigError> {
        self.require(&self.config.n2, "n2")
    }

    pub fn mus(&self) -> Result<Vec<f64>, ConfigError> {
        let v = self.require(&self.config.mu, "mu")?.to_vec();
        if v.is_empty() || v.iter().any(|m| !(*m >= 0.0) || !m.is_finite()) {
            return Err(self.invalid("mu", "values must be finite and non-negative"));
        }
        Ok(v)
    }

    pub fn ranks(&self) -> Result<Vec<usize>, ConfigError> {
        Ok(self.require(&self.config.r, "r")?.to_vec())
    }

    pub fn source_cov(&self) -> Result<CovarianceSpec, ConfigError> {
        self.config.source_spectrum.covariance(self.config.p).map_err(|m| self.invalid("source_spectrum", m))
    }

    pub fn target_cov(&self) -> Result<CovarianceSpec, ConfigError> {
        self.config.target_spectrum.covariance(self.config.p).map_err(|m| self.invalid("target_spectrum", m))
    }

    fn check_target(&self, field: &str, n: usize, strict: bool) -> Result<(), ConfigError> {
        check_target_ratio(self.config.p, n, self.config.dimension_slack, strict).map(|_| ()).map_err(|e| self.invalid(field, e.to_string()))
    }

    /// Checks every constraint the chosen experiment relies on.
    pub fn validate(&self, strict: bool) -> Result<(), ConfigError> {
        let c = &self.config;
        if c.schema_version != SCHEMA_VERSION {
            return Err(self.invalid("schema_version", format!("unsupported version {} (expected {SCHEMA_VERSION})", c.schema_version)));
        }
        if c.p == 0 {
            return Err(self.invalid("p", "dimension must be positive"));
        }
        if !(c.sigma >= 0.0) || !c.sigma.is_finite() {
            return Err(self.invalid("sigma", "noise scale must be finite and non-negative"));
        }
        if !(c.beta0_norm >= 0.0) || !c.beta0_norm.is_finite() {
            return Err(self.invalid("beta0_norm", "must be finite and non-negative"));
        }
        if !(c.dimension_slack >= 0.0) {
            return Err(self.invalid("dimension_slack", "must be non-negative"));
        }
        c.noise_law.validate().map_err(|e| self.invalid("noise_law", e.to_string()))?;
        if let RatioChoice::Value(a) = c.a {
            if !a.is_finite() {
                return Err(self.invalid("a", "ratio must be finite"));
            }
        }
        if c.patience == 0 {
            return Err(self.invalid("patience", "must be at least 1"));
        }
        self.source_cov()?;
        self.target_cov()?;
        let gaussian_only = matches!(c.experiment, ExperimentKind::ModelShift | ExperimentKind::CombinedShift);
        if gaussian_only && c.noise_law != NoiseLaw::Gaussian {
            let msg = "limits for this experiment assume Gaussian designs; results are beyond proven scope";
            if strict {
                return Err(self.invalid("noise_law", msg));
            }
            log::warn!("{msg}");
        }
        match c.experiment {
            ExperimentKind::VarianceCovshift | ExperimentKind::ModelShift | ExperimentKind::CombinedShift | ExperimentKind::Baselines => {
                self.n1_grid()?;
                self.check_target("n2", self.n2()?, strict)?;
                if c.experiment != ExperimentKind::VarianceCovshift {
                    self.mus()?;
                }
                if c.experiment == ExperimentKind::ModelShift && c.source_spectrum != c.target_spectrum {
                    return Err(self.invalid("source_spectrum", "model-shift runs use one covariance for both tasks"));
                }
                if c.experiment == ExperimentKind::VarianceCovshift && c.a == RatioChoice::Keyword(RatioKeyword::Fit) {
                    return Err(self.invalid("a", "variance sweeps need a fixed ratio"));
                }
            }
            ExperimentKind::Multitask => {
                let n = self.require(&c.n, "n")?;
                self.check_target("n", n, strict)?;
                let t = self.require(&c.t, "t")?;
                if t < 2 {
                    return Err(self.invalid("t", "need at least two tasks"));
                }
                let r = self.ranks()?;
                if r.is_empty() || r.iter().any(|r| *r == 0 || *r > t) {
                    return Err(self.invalid("r", format!("widths must lie in 1..={t}")));
                }
                self.mus()?;
            }
            ExperimentKind::Progressive => {
                let pool = self.n1_grid()?;
                if pool.len() != 1 {
                    return Err(self.invalid("n1", "progressive runs take a single source pool size"));
                }
                self.check_target("n2", self.n2()?, strict)?;
                self.mus()?;
                let s = self.require(&c.batches, "batches")?;
                if s == 0 || s > pool[0] {
                    return Err(self.invalid("batches", "need 1 <= batches <= n1"));
                }
                if c.n_val == Some(0) {
                    return Err(self.invalid("n_val", "validation set must be non-empty"));
                }
            }
            ExperimentKind::Regimes => {
                let n2 = self.n2()?;
                if n2 <= c.p {
                    return Err(self.invalid("n2", "need n2 > p"));
                }
                self.mus()?;
                if c.replicates > 0 {
                    self.n1_grid()?;
                }
            }
        }
        Ok(())
    }
}

pub fn kind_name(k: ExperimentKind) -> &'static str {
    match k {
        ExperimentKind::VarianceCovshift => "variance_covshift",
        ExperimentKind::ModelShift => "model_shift",
        ExperimentKind::CombinedShift => "combined_shift",
        ExperimentKind::Baselines => "baselines",
        ExperimentKind::Multitask => "multitask",
        ExperimentKind::Progressive => "progressive",
        ExperimentKind::Regimes => "regimes",
    }
}
