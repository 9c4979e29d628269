use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::MlrMode;
use crate::model::ModelConfig;
use crate::objectives::{LossConfig, LossKind};

/// Everything a training run depends on. Serialized as TOML for config
/// files; every field has a matching CLI flag.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Dataset root holding `manifest.json`.
    pub dataset: PathBuf,
    pub loss: LossKind,
    pub mode: MlrMode,
    pub curvature: f64,
    pub embedding_dim: usize,
    pub hidden: usize,
    pub layers: usize,
    pub dropout: f64,
    pub head_product: bool,
    pub parent_weight: f64,
    pub leaf_weight: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub chunk_seconds: f64,
    pub lr: f64,
    /// Seeds parameter initialization.
    pub seed: u64,
    /// Seeds chunk selection, batch order and dropout masks.
    pub data_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let m = ModelConfig::default();
        let l = LossConfig::default();
        Self {
            dataset: PathBuf::from("data"),
            loss: l.kind,
            mode: m.mode,
            curvature: m.curvature,
            embedding_dim: m.embedding_dim,
            hidden: m.hidden,
            layers: m.layers,
            dropout: m.dropout,
            head_product: m.head_product,
            parent_weight: l.parent_weight,
            leaf_weight: l.leaf_weight,
            epochs: 30,
            batch_size: 10,
            chunk_seconds: 3.2,
            lr: 1e-3,
            seed: 0,
            data_seed: 1,
        }
    }
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            embedding_dim: self.embedding_dim,
            curvature: self.curvature,
            mode: self.mode,
            hidden: self.hidden,
            layers: self.layers,
            dropout: self.dropout,
            head_product: self.head_product,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            kind: self.loss,
            parent_weight: self.parent_weight,
            leaf_weight: self.leaf_weight,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model_config().validate()?;
        self.loss_config().validate()?;
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(self.chunk_seconds > 0.0 && self.chunk_seconds.is_finite()) {
            return Err(Error::Config("chunk length must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }
}
