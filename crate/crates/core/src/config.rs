//! The experiment configuration file: one TOML document that pins every
//! knob a run depends on, so re-running from the resolved copy written next
//! to each run's outputs reproduces it exactly.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::adapt::{MetaConfig, TaskFamily};
use crate::ppo::PPOConfig;
use crate::worldsim::{GenParams, ObservationConfig, RewardConfig};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config parse: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("config serialize: {0}")]
    Serialize(#[from] toml::ser::Error),
}

/// Supervised-adaptation knobs (dataset collection and training).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlParams {
    /// Paired states collected per training task.
    pub states_per_task: usize,
    /// Training tasks drawn from the family range for dataset collection.
    pub tasks: usize,
    pub epochs: usize,
    pub lr: f32,
    pub batch_size: usize,
}

impl Default for SlParams {
    fn default() -> Self {
        Self { states_per_task: 200, tasks: 10, epochs: 40, lr: 1e-3, batch_size: 32 }
    }
}

/// Evaluation episode budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalParams {
    pub n_episodes: usize,
    pub max_steps: usize,
}

impl Default for EvalParams {
    fn default() -> Self {
        Self { n_episodes: 100, max_steps: 200 }
    }
}

/// Everything a run depends on. Unknown keys are rejected so typos surface
/// as named errors instead of silently falling back to defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// Worlds generated by `gen-worlds` and consumed by every later stage.
    pub n_worlds: usize,
    pub world_seed: u64,
    pub task_family: TaskFamily,
    /// Meta-training iterations for `meta-train`.
    pub meta_iterations: usize,
    pub world: GenParams,
    pub nominal_obs: ObservationConfig,
    pub reward: RewardConfig,
    pub ppo: PPOConfig,
    pub meta: MetaConfig,
    pub sl: SlParams,
    pub eval: EvalParams,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 7,
            out_dir: PathBuf::from("runs"),
            n_worlds: 4,
            world_seed: 11,
            task_family: TaskFamily::Height,
            meta_iterations: 200,
            world: GenParams::default(),
            nominal_obs: ObservationConfig::default(),
            reward: RewardConfig::default(),
            ppo: PPOConfig::default(),
            meta: MetaConfig::default(),
            sl: SlParams::default(),
            eval: EvalParams::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn to_toml(&self) -> Result<String, ConfigError> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn from_toml(text: &str) -> Result<Self, ConfigError> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        Self::from_toml(&fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<(), ConfigError> {
        fs::write(path, self.to_toml()?)?;
        Ok(())
    }

    /// FNV-1a over the serialized form; stable across runs of the same
    /// resolved config, used to build collision-free run identifiers.
    pub fn fingerprint(&self) -> Result<u64, ConfigError> {
        let text = self.to_toml()?;
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for b in text.bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x1000_0000_01b3);
        }
        Ok(h)
    }
}
