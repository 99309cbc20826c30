use std::fs;
use std::path::{Path, PathBuf};

use poquim_core::inference::DEFAULT_LEVELS;
use poquim_core::{Criterion, DesignSpec, Family, FitOptions, HypothesisConfig, TestMethod, Truth};
use serde::{Deserialize, Serialize};

use crate::error::{CliError, Result};

/// One JSON run file. `data` drives `fit`/`test`, `simulate` and `oracle`
/// drive their own subcommands.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<DataConfig>,
    #[serde(default)]
    pub fixed: FixedConfig,
    #[serde(default)]
    pub random: Vec<RandomConfig>,
    #[serde(default)]
    pub method: Method,
    #[serde(default)]
    pub fit: FitOptions,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hypothesis: Option<HypothesisConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub test: Option<TestConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub simulate: Option<SimulateConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub oracle: Option<OracleConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<OutputConfig>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV file, relative to the config file's directory.
    pub path: PathBuf,
    pub response: String,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FixedConfig {
    #[serde(default = "yes")]
    pub intercept: bool,
    #[serde(default)]
    pub covariates: Vec<String>,
}

impl Default for FixedConfig {
    fn default() -> Self {
        Self {
            intercept: true,
            covariates: Vec::new(),
        }
    }
}

fn yes() -> bool {
    true
}

/// A random term: indicators of `factor`, scaled row-wise by `weight` if given.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RandomConfig {
    pub factor: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
}

impl RandomConfig {
    pub fn label(&self) -> String {
        match (&self.name, &self.weight) {
            (Some(n), _) => n.clone(),
            (None, Some(w)) => format!("{}:{w}", self.factor),
            (None, None) => self.factor.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Reml,
    Ml,
}

impl From<Method> for Criterion {
    fn from(m: Method) -> Self {
        match m {
            Method::Reml => Criterion::Reml,
            Method::Ml => Criterion::Ml,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TestConfig {
    #[serde(default = "poquim_method")]
    pub method: TestMethod,
    #[serde(default = "default_levels")]
    pub levels: Vec<f64>,
}

impl Default for TestConfig {
    fn default() -> Self {
        Self {
            method: TestMethod::PoquimChi2,
            levels: default_levels(),
        }
    }
}

fn poquim_method() -> TestMethod {
    TestMethod::PoquimChi2
}

fn default_levels() -> Vec<f64> {
    DEFAULT_LEVELS.to_vec()
}

/// A grid of studies: every scenario, optionally crossed with alternative
/// values of one variance ratio.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateConfig {
    #[serde(default)]
    pub title: String,
    pub replicates: usize,
    pub methods: Vec<TestMethod>,
    #[serde(default = "default_levels")]
    pub nominal_levels: Vec<f64>,
    pub scenarios: Vec<Scenario>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alternatives: Option<AlternativeGrid>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub label: String,
    pub design: DesignSpec,
    pub truth: Truth,
    /// Error law first, then one per random term.
    pub distributions: Vec<Family>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AlternativeGrid {
    /// Coordinate of `θ = (λ, γ₁, …)` that is varied; 1 is `γ₁`.
    pub coordinate: usize,
    pub values: Vec<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OracleConfig {
    pub design: DesignSpec,
    pub truth: Truth,
    pub distributions: Vec<Family>,
    #[serde(default = "reml")]
    pub criterion: Criterion,
    pub replicates: usize,
}

fn reml() -> Criterion {
    Criterion::Reml
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputConfig {
    pub path: PathBuf,
}

/// A parsed config and the directory its relative paths refer to.
pub struct Loaded {
    pub config: RunConfig,
    pub path: PathBuf,
    pub base: PathBuf,
}

impl Loaded {
    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| CliError::Config {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let config: RunConfig = serde_json::from_str(&text).map_err(|e| CliError::Config {
            path: path.to_owned(),
            message: e.to_string(),
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(Self {
            config,
            path: path.to_owned(),
            base,
        })
    }

    pub fn error(&self, message: impl Into<String>) -> CliError {
        CliError::Config {
            path: self.path.clone(),
            message: message.into(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_owned()
        } else {
            self.base.join(p)
        }
    }
}
