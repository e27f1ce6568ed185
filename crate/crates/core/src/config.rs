use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objectives::{ObjectiveSet, DEFAULT_EPSILON_REG};
use crate::proposers::{DiagnoserThresholds, EditOps, RemoteConfig};
use crate::retrieval::RetrievalConfig;
use crate::selector::DEFAULT_EPSILON_TOL;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProposerMode {
    #[default]
    Rule,
    Remote,
}

impl std::str::FromStr for ProposerMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "rule" => Ok(Self::Rule),
            "remote" => Ok(Self::Remote),
            other => Err(Error::Config(format!("unknown proposer mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposerConfig {
    pub mode: ProposerMode,
    pub remote: Option<RemoteConfig>,
    pub thresholds: DiagnoserThresholds,
}

impl Default for ProposerConfig {
    fn default() -> Self {
        Self {
            mode: ProposerMode::Rule,
            remote: None,
            thresholds: DiagnoserThresholds::default(),
        }
    }
}

/// Configuration of a curation run, read from JSON.
///
/// Only `world` is required. Relative paths are resolved against the
/// config file's directory by [`RunConfig::load`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rounds: u32,
    pub candidates: usize,
    pub epsilon_tol: f64,
    pub retrieval: RetrievalConfig,
    pub epsilon_reg: f64,
    pub objectives: ObjectiveSet,
    pub edit_ops: EditOps,
    pub success_threshold: f64,
    pub seed: u64,
    /// Synthetic world file holding the support, query and test splits.
    pub world: PathBuf,
    /// Persist the replay cache here; in-memory when absent.
    pub cache_dir: Option<PathBuf>,
    pub proposer: ProposerConfig,
    pub embedding_dim: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rounds: 10,
            candidates: 4,
            epsilon_tol: DEFAULT_EPSILON_TOL,
            retrieval: RetrievalConfig::default(),
            epsilon_reg: DEFAULT_EPSILON_REG,
            objectives: ObjectiveSet::ALL,
            edit_ops: EditOps::ALL,
            success_threshold: 1.0,
            seed: 0,
            world: PathBuf::new(),
            cache_dir: None,
            proposer: ProposerConfig::default(),
            embedding_dim: crate::embedding::DEFAULT_DIMENSION,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str, location: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            location: location.to_string(),
            message: e.to_string(),
        })?;
        Ok(cfg)
    }

    /// Read and validate a config file.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text, &path.display().to_string())?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.world = resolve(base, &cfg.world);
        cfg.cache_dir = cfg.cache_dir.as_deref().map(|d| resolve(base, d));
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.retrieval.validate()?;
        if self.candidates == 0 {
            return Err(Error::Config("candidates must be at least 1".into()));
        }
        if !(self.epsilon_tol.is_finite() && self.epsilon_tol >= 0.0) {
            return Err(Error::Config(format!(
                "epsilon_tol must be a non-negative number, got {}",
                self.epsilon_tol
            )));
        }
        if !(self.epsilon_reg.is_finite() && self.epsilon_reg > 0.0) {
            return Err(Error::Config(format!(
                "epsilon_reg must be positive, got {}",
                self.epsilon_reg
            )));
        }
        if !(0.0..=1.0).contains(&self.success_threshold) {
            return Err(Error::Config(format!(
                "success_threshold must lie in [0, 1], got {}",
                self.success_threshold
            )));
        }
        if self.embedding_dim == 0 {
            return Err(Error::Config("embedding_dim must be positive".into()));
        }
        if !self.edit_ops.add {
            return Err(Error::Config(
                "edit operation `add` cannot be disabled".into(),
            ));
        }
        if self.world.as_os_str().is_empty() {
            return Err(Error::Config("`world` path is required".into()));
        }
        if self.proposer.thresholds.remove > self.proposer.thresholds.keep {
            return Err(Error::Config(
                "diagnoser remove threshold exceeds keep threshold".into(),
            ));
        }
        if self.proposer.mode == ProposerMode::Remote && self.proposer.remote.is_none() {
            return Err(Error::Config(
                "proposer mode `remote` needs a `proposer.remote` section".into(),
            ));
        }
        Ok(())
    }
}

fn resolve(base: &Path, p: &Path) -> PathBuf {
    if p.is_absolute() || p.as_os_str().is_empty() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}
