//! Run configuration: a TOML file merged with command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::orchestrator::{CycleConfig, ExperimentConfig};
use crate::simulator::{CorpusConfig, SimConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read config {path}: {source}")]
    Read {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("invalid config {path}: {source}")]
    Parse {
        path: PathBuf,
        source: toml::de::Error,
    },
}

/// Every random stream of a run descends from `seed` through
/// [`crate::seed::derive_seed`] with a component label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: Option<PathBuf>,
    pub sessions: u64,
    pub turns_per_session: u64,
    pub corpus: CorpusConfig,
    pub sim: SimConfig,
    pub cycle: CycleConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        let e = ExperimentConfig::default();
        Self {
            seed: 0,
            out_dir: None,
            sessions: e.sessions,
            turns_per_session: e.turns_per_session,
            corpus: e.corpus,
            sim: e.sim,
            cycle: e.cycle,
        }
    }
}

/// Flag values that win over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out_dir: Option<PathBuf>,
    pub sessions: Option<u64>,
    pub turns_per_session: Option<u64>,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self, ConfigError> {
        toml::from_str(text).map_err(|source| ConfigError::Parse {
            path: path.to_path_buf(),
            source,
        })
    }

    /// Defaults, then the file if given, then the overrides.
    pub fn load(path: Option<&Path>, overrides: &Overrides) -> Result<Self, ConfigError> {
        let mut cfg = match path {
            Some(p) => {
                let text = fs::read_to_string(p).map_err(|source| ConfigError::Read {
                    path: p.to_path_buf(),
                    source,
                })?;
                Self::from_toml(&text, p)?
            }
            None => Self::default(),
        };
        cfg.apply(overrides);
        Ok(cfg)
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.out_dir {
            self.out_dir = Some(d.clone());
        }
        if let Some(n) = o.sessions {
            self.sessions = n;
        }
        if let Some(n) = o.turns_per_session {
            self.turns_per_session = n;
        }
    }

    pub fn experiment(&self) -> ExperimentConfig {
        ExperimentConfig {
            sessions: self.sessions,
            turns_per_session: self.turns_per_session,
            corpus: self.corpus,
            sim: self.sim,
            cycle: self.cycle,
        }
    }

    /// `path` relative to the output directory, if one is set.
    pub fn output_path(&self, path: &Path) -> PathBuf {
        match &self.out_dir {
            Some(d) if path.is_relative() => d.join(path),
            _ => path.to_path_buf(),
        }
    }
}
