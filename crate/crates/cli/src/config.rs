//! Experiment configuration: one JSON document per run.

use std::path::{Path, PathBuf};

use fairmesh::fairness::ScanOptions;
use fairmesh::mesh::MeshConfig;
use fairmesh::sched::link::LinkConfig;
use fairmesh::sched::SchedulerParams;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::presets;

pub const SCHEMA_VERSION: u32 = 1;

/// Environment variable that overrides `output_dir`.
pub const OUT_ENV: &str = "FAIRMESH_OUT";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{0}")]
    Parse(#[from] serde_json::Error),
    #[error("`{key}`: {msg}")]
    Invalid { key: &'static str, msg: String },
    #[error("`{key}` is required for {kind} experiments")]
    Missing {
        key: &'static str,
        kind: ExperimentKind,
    },
    #[error("unknown preset `{0}` (see `fairmesh presets`)")]
    UnknownPreset(String),
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    StandaloneScheduler,
    MeshHotspot,
    RfbVsCfbPathology,
    #[serde(alias = "eq13-feasibility")]
    SRatioFeasibility,
    ArbConvergence,
}

impl std::fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ExperimentKind::StandaloneScheduler => "standalone-scheduler",
            ExperimentKind::MeshHotspot => "mesh-hotspot",
            ExperimentKind::RfbVsCfbPathology => "rfb-vs-cfb-pathology",
            ExperimentKind::SRatioFeasibility => "s-ratio-feasibility",
            ExperimentKind::ArbConvergence => "arb-convergence",
        };
        f.write_str(s)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Seeds {
    One(u64),
    Many(Vec<u64>),
}

impl Seeds {
    pub fn list(&self) -> Vec<u64> {
        match self {
            Seeds::One(s) => vec![*s],
            Seeds::Many(v) => v.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArbSetup {
    pub weights: Vec<f64>,
    #[serde(default = "default_trials")]
    pub trials: u64,
}

fn default_trials() -> u64 {
    1_000_000
}

fn default_repetitions() -> u32 {
    1
}

fn default_epsilon() -> f64 {
    0.05
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema_version: u32,
    pub kind: ExperimentKind,
    pub seed: Seeds,
    /// Runs per listed seed; repetition `r > 0` of seed `s` uses a seed
    /// derived from `(s, r)`.
    #[serde(default = "default_repetitions")]
    pub repetitions: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mesh: Option<MeshConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub link: Option<LinkConfig>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub schedulers: Vec<SchedulerParams>,
    #[serde(default)]
    pub fairness: ScanOptions,
    /// Tolerance for the S-ratio feasibility check.
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub arbitration: Option<ArbSetup>,
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Read a config file, or an embedded preset written as `preset:NAME`.
    pub fn load(spec: &str) -> Result<Self, ConfigError> {
        if let Some(name) = spec.strip_prefix("preset:") {
            return presets::get(name)
                .ok_or_else(|| ConfigError::UnknownPreset(name.to_string()))
                .and_then(Self::from_json);
        }
        let path = Path::new(spec);
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let invalid = |key, msg: String| Err(ConfigError::Invalid { key, msg });
        if self.schema_version != SCHEMA_VERSION {
            return invalid(
                "schema_version",
                format!("expected {SCHEMA_VERSION}, got {}", self.schema_version),
            );
        }
        if self.seed.list().is_empty() {
            return invalid("seed", "at least one seed is required".into());
        }
        if self.repetitions == 0 {
            return invalid("repetitions", "must be at least 1".into());
        }
        if self.epsilon.is_nan() || self.epsilon < 0.0 {
            return invalid("epsilon", "must be non-negative".into());
        }
        let kind = self.kind;
        match kind {
            ExperimentKind::MeshHotspot | ExperimentKind::SRatioFeasibility => {
                let mesh = self
                    .mesh
                    .as_ref()
                    .ok_or(ConfigError::Missing { key: "mesh", kind })?;
                if let Err(e) = mesh.validate() {
                    return invalid("mesh", e.to_string());
                }
            }
            ExperimentKind::StandaloneScheduler | ExperimentKind::RfbVsCfbPathology => {
                let link = self
                    .link
                    .as_ref()
                    .ok_or(ConfigError::Missing { key: "link", kind })?;
                if let Err(e) = link.validate() {
                    return invalid("link", e.to_string());
                }
                if self.schedulers.is_empty() {
                    return Err(ConfigError::Missing {
                        key: "schedulers",
                        kind,
                    });
                }
                for s in &self.schedulers {
                    if let Err(e) = s.validate() {
                        return invalid("schedulers", e.to_string());
                    }
                }
            }
            ExperimentKind::ArbConvergence => {
                let arb = self.arbitration.as_ref().ok_or(ConfigError::Missing {
                    key: "arbitration",
                    kind,
                })?;
                if arb.weights.is_empty() || arb.weights.iter().any(|w| w.is_nan() || *w <= 0.0) {
                    return invalid(
                        "arbitration.weights",
                        "need at least one positive weight".into(),
                    );
                }
                if arb.trials == 0 {
                    return invalid("arbitration.trials", "must be at least 1".into());
                }
            }
        }
        Ok(())
    }

    /// Every seed actually run, in order.
    pub fn run_seeds(&self) -> Vec<u64> {
        let mut out = Vec::new();
        for s in self.seed.list() {
            out.push(s);
            for r in 1..self.repetitions {
                out.push(fairmesh::rng::derive_seed(s, u64::from(r)));
            }
        }
        out
    }

    /// `FAIRMESH_OUT` if set, else `output_dir`, else `out/<kind>`.
    pub fn resolve_output_dir(&self) -> PathBuf {
        if let Some(dir) = std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()) {
            return PathBuf::from(dir);
        }
        self.output_dir
            .clone()
            .unwrap_or_else(|| PathBuf::from("out").join(self.kind.to_string()))
    }
}
