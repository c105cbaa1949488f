//! Run configuration: one JSON file drives every pipeline stage.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Observation/prediction windowing on the resampled time grid.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct Horizons {
    pub t_obs: usize,
    pub t_pre: usize,
    /// Resampled frame spacing in seconds.
    pub dt: f64,
}

impl Default for Horizons {
    fn default() -> Self {
        Horizons {
            t_obs: 8,
            t_pre: 12,
            dt: 0.4,
        }
    }
}

/// How the regression head parameterizes its output.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum RegressionTarget {
    /// Predict normalized coordinates directly.
    Absolute,
    /// Predict a residual added to the selected anchor trajectory.
    AnchorOffset,
}

/// Model architecture and head settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub mae_layers: usize,
    pub hid_layers: usize,
    pub ffn_factor: usize,
    /// Number of motion modes (anchors).
    pub k_modes: usize,
    /// Candidates decoded at inference (best-of-N).
    pub k_top: usize,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub loss_weight_reg: f64,
    pub loss_weight_cls: f64,
    /// Use squared distances when building soft labels.
    pub soft_label_squared: bool,
    pub regression_target: RegressionTarget,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_model: 128,
            heads: 4,
            mae_layers: 2,
            hid_layers: 1,
            ffn_factor: 2,
            k_modes: 100,
            k_top: 20,
            lambda_min: 0.0,
            lambda_max: 1.0,
            loss_weight_reg: 1.0,
            loss_weight_cls: 1.0,
            soft_label_squared: false,
            regression_target: RegressionTarget::Absolute,
        }
    }
}

/// Optimizer and loop settings.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub augment: bool,
    /// Half-width of the random scale jitter (scale = 1 ± this).
    pub scale_jitter: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            augment: true,
            scale_jitter: 0.05,
        }
    }
}

/// Full run configuration with defaults matching the documented protocol.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub horizons: Horizons,
    pub model: ModelConfig,
    pub training: TrainConfig,
    /// Neighbor retention radius in meters.
    pub neighbor_radius: f64,
    /// Temporal train fraction.
    pub split_ratio: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            horizons: Horizons::default(),
            model: ModelConfig::default(),
            training: TrainConfig::default(),
            neighbor_radius: 30.0,
            split_ratio: 0.8,
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("cannot parse config {}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let m = &self.model;
        if m.d_model == 0 || m.heads == 0 || m.d_model % m.heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of heads {}",
                m.d_model, m.heads
            )));
        }
        if m.k_top == 0 || m.k_top > m.k_modes {
            return Err(Error::Config(format!(
                "k_top {} must be in 1..=k_modes {}",
                m.k_top, m.k_modes
            )));
        }
        if m.lambda_min > m.lambda_max {
            return Err(Error::Config("lambda_min exceeds lambda_max".into()));
        }
        if m.loss_weight_reg <= 0.0 || m.loss_weight_cls < 0.0 {
            return Err(Error::Config("loss weights must be positive".into()));
        }
        if self.horizons.t_obs < 2 || self.horizons.t_pre < 2 {
            return Err(Error::Config("horizons need at least 2 frames each".into()));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio <= 1.0) {
            return Err(Error::Config("split_ratio must be in (0, 1]".into()));
        }
        if self.training.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model.d_model / self.model.heads
    }
}
