//! Harness configuration: a profile supplies every default and an optional
//! JSON file overrides any subset of fields.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;
use vla_core::fisher::SpebSweepConfig;
use vla_core::nomp::SolverConfig;
use vla_core::scenario::ScenarioSpec;
use vla_core::OfdmGrid;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}:{column}: {message}")]
    Syntax {
        path: String,
        line: usize,
        column: usize,
        message: String,
    },
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, clap::ValueEnum, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    #[default]
    Desk,
    Paper,
}

/// One benchmarked method.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Method {
    /// Single OMP detection over the room box.
    Omp,
    /// NOMP with the room-box initializer and `L` iterations.
    Nomp(usize),
    /// NOMP with the learned (or oracle-perturbed) initializer.
    MlNomp(usize),
    /// The initializer's guess alone.
    Ml,
    TwoStepLs,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::Omp => write!(f, "omp"),
            Method::Nomp(l) => write!(f, "nomp-l{l}"),
            Method::MlNomp(l) => write!(f, "ml-nomp-l{l}"),
            Method::Ml => write!(f, "ml"),
            Method::TwoStepLs => write!(f, "two-step-ls"),
        }
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let paths = |rest: &str| -> Result<usize, String> {
            match rest.parse::<usize>() {
                Ok(l) if l >= 1 => Ok(l),
                _ => Err(format!("bad iteration count in method \"{s}\"")),
            }
        };
        match s.trim() {
            "omp" => Ok(Method::Omp),
            "ml" => Ok(Method::Ml),
            "two-step-ls" => Ok(Method::TwoStepLs),
            t => {
                if let Some(rest) = t.strip_prefix("ml-nomp-l") {
                    paths(rest).map(Method::MlNomp)
                } else if let Some(rest) = t.strip_prefix("nomp-l") {
                    paths(rest).map(Method::Nomp)
                } else {
                    Err(format!(
                        "unknown method \"{s}\" (expected omp, nomp-l<L>, ml-nomp-l<L>, ml, two-step-ls)"
                    ))
                }
            }
        }
    }
}

impl TryFrom<String> for Method {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Method> for String {
    fn from(m: Method) -> Self {
        m.to_string()
    }
}

pub fn parse_methods(list: &str) -> Result<Vec<Method>, String> {
    list.split(',').filter(|s| !s.trim().is_empty()).map(str::parse).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchConfig {
    pub trials: usize,
    pub methods: Vec<Method>,
    /// Radius of the oracle-perturbed initializer used when no model is set.
    pub oracle_error_m: f64,
    /// Weights file for the learned initializer.
    pub model: Option<PathBuf>,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            trials: 200,
            methods: vec![
                Method::Omp,
                Method::Nomp(1),
                Method::Nomp(3),
                Method::Ml,
                Method::MlNomp(1),
                Method::MlNomp(3),
                Method::TwoStepLs,
            ],
            oracle_error_m: 1.2,
            model: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub count: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self { count: 1000 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    pub scenario: ScenarioSpec,
    pub solver: SolverConfig,
    pub bench: BenchConfig,
    pub sweep: SpebSweepConfig,
    pub dataset: DatasetConfig,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self::for_profile(Profile::Desk)
    }
}

impl HarnessConfig {
    pub fn for_profile(profile: Profile) -> Self {
        match profile {
            Profile::Desk => Self {
                scenario: ScenarioSpec::default(),
                solver: SolverConfig::desk(),
                bench: BenchConfig::default(),
                sweep: SpebSweepConfig::default(),
                dataset: DatasetConfig::default(),
            },
            Profile::Paper => Self {
                scenario: ScenarioSpec::paper(),
                solver: SolverConfig::paper(),
                bench: BenchConfig::default(),
                sweep: SpebSweepConfig {
                    grid: OfdmGrid::paper(),
                    ..SpebSweepConfig::default()
                },
                dataset: DatasetConfig::default(),
            },
        }
    }

    /// Profile defaults overlaid with the fields present in `text`.
    pub fn from_json(text: &str, origin: &str, profile: Profile) -> Result<Self, ConfigError> {
        let syntax = |e: serde_json::Error| ConfigError::Syntax {
            path: origin.to_string(),
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        };
        // typed parse of the file alone for line-accurate field diagnostics
        serde_json::from_str::<HarnessConfig>(text).map_err(syntax)?;
        let overlay: Value = serde_json::from_str(text).map_err(syntax)?;
        let mut base = serde_json::to_value(Self::for_profile(profile)).expect("config serializes");
        merge(&mut base, overlay);
        let config: Self = serde_json::from_value(base).map_err(|e| ConfigError::Invalid(format!("{origin}: {e}")))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: Option<&Path>, profile: Profile) -> Result<Self, ConfigError> {
        match path {
            None => {
                let config = Self::for_profile(profile);
                config.validate()?;
                Ok(config)
            }
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|source| ConfigError::Io {
                    path: p.display().to_string(),
                    source,
                })?;
                Self::from_json(&text, &p.display().to_string(), profile)
            }
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |section: &str, e: vla_core::Error| ConfigError::Invalid(format!("{section}: {e}"));
        self.scenario.validate().map_err(|e| invalid("scenario", e))?;
        self.solver.validate().map_err(|e| invalid("solver", e))?;
        if self.bench.trials == 0 {
            return Err(ConfigError::Invalid("bench.trials must be >= 1".into()));
        }
        if self.bench.methods.is_empty() {
            return Err(ConfigError::Invalid("bench.methods must not be empty".into()));
        }
        if !(self.bench.oracle_error_m >= 0.0) {
            return Err(ConfigError::Invalid("bench.oracle_error_m must be >= 0".into()));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, overlay: Value) {
    match (base, overlay) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
