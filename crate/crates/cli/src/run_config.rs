//! Flat JSON run configuration: one diff-able record per training run.
//! Values come from a config file, are overridden by command-line flags, and
//! default otherwise; the fully resolved config is echoed into the output
//! directory as `run_config.json`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use dhl_core::model::ModelConfig;
use dhl_core::train::{TrainConfig, TrainMode};

use crate::CliError;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    // model
    pub embed_dim: usize,
    pub hidden_dim: usize,
    pub use_cross_attention: bool,
    pub use_hier_weights: bool,
    pub use_soft_label: bool,
    pub soft_s0: f64,
    pub epsilon: f64,
    // optimization
    pub model_lr: f64,
    pub weightnet_lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// "bilevel", "joint", or "fixed-weights"
    pub mode: String,
    pub per_instance_omega: bool,
    // data paths (filled from flags)
    pub train_data: String,
    pub dev_data: String,
    pub out_dir: String,
}

impl Default for RunConfig {
    fn default() -> Self {
        let model = ModelConfig::default();
        let train = TrainConfig::default();
        RunConfig {
            embed_dim: model.embed_dim,
            hidden_dim: model.hidden_dim,
            use_cross_attention: model.use_cross_attention,
            use_hier_weights: model.use_hier_weights,
            use_soft_label: model.use_soft_label,
            soft_s0: model.soft_s0,
            epsilon: model.epsilon,
            model_lr: train.model_lr,
            weightnet_lr: train.weightnet_lr,
            epochs: train.epochs,
            batch_size: train.batch_size,
            seed: train.seed,
            mode: "bilevel".into(),
            per_instance_omega: train.per_instance_omega,
            train_data: String::new(),
            dev_data: String::new(),
            out_dir: String::new(),
        }
    }
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("bad config {}: {e}", path.display())))
    }

    pub fn parse_mode(&self) -> Result<TrainMode, String> {
        match self.mode.as_str() {
            "bilevel" => Ok(TrainMode::Bilevel),
            "joint" => Ok(TrainMode::Joint),
            "fixed-weights" => Ok(TrainMode::FixedWeights),
            other => Err(format!(
                "unknown mode {other:?}; expected bilevel, joint, or fixed-weights"
            )),
        }
    }

    /// Model config with levels and vocabulary sizes taken from the data.
    pub fn model_config(&self, levels: usize, vocab_sizes: Vec<usize>) -> Result<ModelConfig, String> {
        let config = ModelConfig {
            embed_dim: self.embed_dim,
            hidden_dim: self.hidden_dim,
            levels,
            vocab_sizes,
            use_cross_attention: self.use_cross_attention,
            use_hier_weights: self.use_hier_weights,
            use_soft_label: self.use_soft_label,
            soft_s0: self.soft_s0,
            epsilon: self.epsilon,
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }

    pub fn train_config(&self) -> Result<TrainConfig, String> {
        let config = TrainConfig {
            model_lr: self.model_lr,
            weightnet_lr: self.weightnet_lr,
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            mode: self.parse_mode()?,
            per_instance_omega: self.per_instance_omega,
        };
        config.validate().map_err(|e| e.to_string())?;
        Ok(config)
    }
}
