//! Experiment configuration: loss weights, model dimensions, optimizer and
//! schedule settings, and the ablation switches. Mirrors the JSON config
//! file one-to-one; unknown keys are rejected.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate schedule over stage-1 iterations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Weight of the latent augmentation loss.
    pub alpha: f64,
    /// Weight of the reconstruction loss.
    pub beta: f64,
    /// Weight of the classification loss.
    pub gamma: f64,
    /// Final augmentation strength; ramps linearly from 0 over stage 1.
    pub lambda0: f64,
    /// Number of latent categories M.
    pub latent_count: usize,
    /// Feature channels D produced by the encoder.
    pub feature_dim: usize,
    /// Hidden channel widths of the 3x3 conv encoder; the final conv always
    /// maps to `feature_dim`.
    pub encoder_channels: Vec<usize>,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lr_schedule: LrSchedule,
    pub stage1_epochs: usize,
    pub stage2_epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Ablation switch: route features through the latent pool and fused
    /// decoder. Off = plain encoder + GAP + linear classifier.
    pub use_latent: bool,
    /// Ablation switch: add the augmentation term (alpha).
    pub use_aug_loss: bool,
    /// Ablation switch: add the reconstruction term (beta).
    pub use_recon_loss: bool,
    /// Augmentation strategy name; see the strategy registry. `latent`
    /// bounds the latent-pool head, `raw_isda` bounds the classifier on
    /// pooled encoder features keyed by true labels, `none` adds nothing.
    pub aug_strategy: String,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
            gamma: 1.0,
            lambda0: 0.5,
            latent_count: 12,
            feature_dim: 16,
            encoder_channels: vec![12],
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            lr_schedule: LrSchedule::Cosine,
            stage1_epochs: 10,
            stage2_epochs: 2,
            batch_size: 16,
            seed: 0,
            use_latent: true,
            use_aug_loss: true,
            use_recon_loss: true,
            aug_strategy: "latent".to_string(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda0", self.lambda0),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if self.latent_count == 0 || self.feature_dim == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "latent_count, feature_dim, and batch_size must be >= 1".to_string(),
            ));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config(format!(
                "learning_rate must be positive, got {}",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config(format!(
                "weight_decay must be finite and >= 0, got {}",
                self.weight_decay
            )));
        }
        if self.encoder_channels.contains(&0) {
            return Err(Error::Config("encoder_channels entries must be >= 1".to_string()));
        }
        Ok(())
    }

    /// Read from a JSON file. A missing file is a configuration error that
    /// names the path.
    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!("config file not found: {}", path.display())));
        }
        let text = fs::read_to_string(path)?;
        let cfg: Self = serde_json::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}
