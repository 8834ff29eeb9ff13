//! Run configuration files.
//!
//! Every field has a default, so `{}` is a complete config. Unknown keys are
//! rejected at every level.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::agent::Hyperparams;
use crate::analysis::AnalysisThresholds;
use crate::error::{DailError, Result};
use crate::gridworld::EnvConfig;

/// Environment variable that overrides `train.seed`.
pub const SEED_ENV: &str = "DAIL_SEED";

fn d_instructions() -> usize {
    1
}
fn d_n_traj() -> usize {
    64
}
fn d_ratio() -> f64 {
    0.5
}
fn d_episodes() -> usize {
    100
}
fn d_states() -> usize {
    200
}
fn d_out() -> PathBuf {
    PathBuf::from("runs/default")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default = "d_instructions")]
    pub num_instructions: usize,
    #[serde(default)]
    pub mapping_seed: u64,
    #[serde(default = "d_n_traj")]
    pub n_traj: usize,
    #[serde(default = "d_ratio")]
    pub success_ratio: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            num_instructions: d_instructions(),
            mapping_seed: 0,
            n_traj: d_n_traj(),
            success_ratio: d_ratio(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnalysisConfig {
    #[serde(default)]
    pub thresholds: AnalysisThresholds,
    #[serde(default = "d_episodes")]
    pub n_episodes: usize,
    #[serde(default = "d_states")]
    pub n_states: usize,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            thresholds: AnalysisThresholds::default(),
            n_episodes: d_episodes(),
            n_states: d_states(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: Hyperparams,
    #[serde(default)]
    pub analysis: AnalysisConfig,
    #[serde(default = "d_out")]
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            env: EnvConfig::default(),
            data: DataConfig::default(),
            train: Hyperparams::default(),
            analysis: AnalysisConfig::default(),
            out_dir: d_out(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| DailError::Schema(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| DailError::io(path, e))?;
        Self::from_json(&text).map_err(|e| match e {
            DailError::Schema(m) => DailError::Schema(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.env.validate()?;
        self.train.validate()?;
        self.analysis.thresholds.validate()?;
        if self.data.num_instructions == 0 || self.data.n_traj == 0 {
            return Err(DailError::invalid("data.num_instructions and data.n_traj must be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.data.success_ratio) {
            return Err(DailError::invalid("data.success_ratio must lie in [0, 1]"));
        }
        Ok(())
    }

    /// Applies `DAIL_SEED` if set.
    pub fn apply_env_overrides(&mut self) -> Result<()> {
        if let Ok(v) = std::env::var(SEED_ENV) {
            self.train.seed = v
                .trim()
                .parse()
                .map_err(|_| DailError::invalid(format!("{SEED_ENV}={v} is not an unsigned integer")))?;
        }
        Ok(())
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).unwrap_or_default()
    }
}
