use std::path::Path;

use serde::{Deserialize, Serialize};

use super::IoError;
use crate::annotation::AnnotatorConfig;
use crate::envs::EnvConfig;
use crate::lapp_loop::LoopConfig;
use crate::preference::PredictorConfig;
use crate::rl::PPOConfig;
use crate::trainer::TrainerConfig;

pub const CONFIG_VERSION: u32 = 1;

fn d_version() -> u32 {
    CONFIG_VERSION
}

/// Everything a run needs. Every key has a default, so an empty file is a
/// valid configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "d_version")]
    pub version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub env: EnvConfig,
    #[serde(default)]
    pub predictor: PredictorConfig,
    #[serde(default)]
    pub trainer: TrainerConfig,
    #[serde(default)]
    pub ppo: PPOConfig,
    #[serde(default, rename = "loop")]
    pub run: LoopConfig,
    #[serde(default)]
    pub annotator: AnnotatorConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            seed: 0,
            env: EnvConfig::default(),
            predictor: PredictorConfig::default(),
            trainer: TrainerConfig::default(),
            ppo: PPOConfig::default(),
            run: LoopConfig::default(),
            annotator: AnnotatorConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, IoError> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| IoError::Config(e.to_string()))?;
        if cfg.version != CONFIG_VERSION {
            return Err(IoError::Version {
                what: "config",
                found: cfg.version,
                expected: CONFIG_VERSION,
            });
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String, IoError> {
        toml::to_string(self).map_err(|e| IoError::Config(e.to_string()))
    }

    /// Checks every section and the cross-section constraints.
    pub fn validate(&self) -> Result<(), IoError> {
        let invalid = |section: &str, e: &dyn std::fmt::Display| IoError::Config(format!("[{section}] {e}"));
        self.env.validate(self.run.segment_len).map_err(|e| invalid("env", &e))?;
        self.predictor.validate().map_err(|e| invalid("predictor", &e))?;
        self.trainer.validate().map_err(|e| invalid("trainer", &e))?;
        self.ppo.validate().map_err(|e| invalid("ppo", &e))?;
        self.run.validate().map_err(|e| invalid("loop", &e))?;
        self.annotator.validate().map_err(|e| invalid("annotator", &e))?;
        Ok(())
    }
}

/// Reads, parses and validates a TOML run configuration.
pub fn load_config(path: &Path) -> Result<RunConfig, IoError> {
    let text = std::fs::read_to_string(path).map_err(|e| IoError::File {
        path: path.to_path_buf(),
        error: e,
    })?;
    RunConfig::from_toml(&text).map_err(|e| match e {
        IoError::Config(m) => IoError::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}
