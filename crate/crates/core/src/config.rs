//! Run configuration, loadable from TOML. Every field has a default, so a
//! config file only needs the values it changes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::losses::LossWeights;
use crate::network::ModelConfig;
use crate::scene::SceneConfig;
use crate::tensor::{OptimizerConfig, OptimizerKind};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    /// Weight of the auxiliary scoring-head objective.
    pub score_weight: f64,
    /// Progress is logged every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            score_weight: 1.0,
            log_every: 50,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    /// Scenes written by `gen`.
    pub num_scenes: usize,
    pub voxel_size: f64,
    pub model: ModelConfig,
    pub scene: SceneConfig,
    pub weights: LossWeights,
    pub optimizer: OptimizerConfig,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_scenes: 3,
            voxel_size: 0.2,
            model: ModelConfig::default(),
            scene: SceneConfig::default(),
            weights: LossWeights::default(),
            optimizer: OptimizerConfig {
                kind: OptimizerKind::Adam,
                lr: 3e-3,
                ..OptimizerConfig::default()
            },
            train: TrainConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.voxel_size > 0.0) {
            return Err(Error::Config(format!("voxel_size must be > 0, got {}", self.voxel_size)));
        }
        if !(self.optimizer.lr > 0.0) {
            return Err(Error::Config(format!("optimizer.lr must be > 0, got {}", self.optimizer.lr)));
        }
        if !(self.train.score_weight >= 0.0) {
            return Err(Error::Config("train.score_weight must be >= 0".into()));
        }
        self.model.validate()?;
        self.scene.validate()?;
        self.weights.validate()
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let de = toml::Deserializer::parse(text).map_err(|e| Error::Config(e.to_string()))?;
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| Error::Schema {
            path: e.path().to_string(),
            message: e.inner().to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}
