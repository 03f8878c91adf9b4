use serde::{Deserialize, Serialize};

use crate::codec::CodecConfig;
use crate::engine::Variant;
use crate::error::{Result, VleError};
use crate::losses::LossConfig;
use crate::training::optim::AdamConfig;
use crate::training::sampler::TokenSampler;

/// Learning-rate multiplier over the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LrSchedule {
    #[default]
    Constant,
    /// Half-cosine from `lr` at step 0 to 0 at `total_steps`.
    Cosine,
}

impl LrSchedule {
    pub fn factor(self, step: u64, total_steps: u64) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Cosine => {
                let t = (step as f64 / total_steps.max(1) as f64).min(1.0);
                0.5 * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// Flat training configuration; every key may appear in a TOML file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub n_min: usize,
    pub n_cap: usize,
    /// Curriculum mean at step 0; defaults to `n_min`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_start: Option<f64>,
    /// Curriculum mean at the last step; defaults to `n_cap`.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mu_end: Option<f64>,
    pub sigma: f64,

    pub lr: f64,
    pub lr_schedule: LrSchedule,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,

    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub image_size: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_root: Option<String>,
    /// Write a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,

    pub lambda_mask: f64,
    pub recon_distinctness: bool,
    pub detach_steps: bool,

    pub image_channels: usize,
    pub base_channels: usize,
    pub residual_blocks_per_level: usize,
    pub levels: usize,
    pub latent_channels: usize,
    pub lstm_hidden_channels: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let codec = CodecConfig::default();
        let adam = AdamConfig::default();
        TrainConfig {
            variant: Variant::Vanilla,
            n_min: 1,
            n_cap: 5,
            mu_start: None,
            mu_end: None,
            sigma: 1.0,
            lr: adam.lr,
            lr_schedule: LrSchedule::Constant,
            beta1: adam.beta1,
            beta2: adam.beta2,
            eps: adam.eps,
            weight_decay: adam.weight_decay,
            batch_size: 16,
            total_steps: 1000,
            seed: 0,
            image_size: 32,
            data_root: None,
            checkpoint_every: 0,
            lambda_mask: 1.0,
            recon_distinctness: false,
            detach_steps: false,
            image_channels: codec.image_channels,
            base_channels: codec.base_channels,
            residual_blocks_per_level: codec.residual_blocks_per_level,
            levels: codec.levels,
            latent_channels: codec.latent_channels,
            lstm_hidden_channels: codec.lstm_hidden_channels,
        }
    }
}

impl TrainConfig {
    /// Defaults suited to the masked variant (which needs at least two tokens).
    pub fn masked() -> Self {
        TrainConfig {
            variant: Variant::Masked,
            n_min: 2,
            ..TrainConfig::default()
        }
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| VleError::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("train config serializes")
    }

    pub fn codec_config(&self) -> CodecConfig {
        CodecConfig {
            image_channels: self.image_channels,
            base_channels: self.base_channels,
            residual_blocks_per_level: self.residual_blocks_per_level,
            levels: self.levels,
            latent_channels: self.latent_channels,
            mask_enabled: self.variant == Variant::Masked,
            lstm_hidden_channels: self.lstm_hidden_channels,
        }
    }

    pub fn adam_config(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            lambda_mask: self.lambda_mask,
            recon_distinctness: self.recon_distinctness,
        }
    }

    pub fn sampler(&self) -> Result<TokenSampler> {
        TokenSampler::new(
            self.n_min,
            self.n_cap,
            self.mu_start.unwrap_or(self.n_min as f64),
            self.mu_end.unwrap_or(self.n_cap as f64),
            self.sigma,
            self.total_steps,
        )
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::Masked && self.n_min < 2 {
            return Err(VleError::Config(format!(
                "n_min = {}: the masked variant trains with at least two tokens",
                self.n_min
            )));
        }
        self.sampler()?;
        if self.batch_size == 0 {
            return Err(VleError::Config("batch_size must be at least 1".into()));
        }
        for (key, v) in [("lr", self.lr), ("weight_decay", self.weight_decay), ("eps", self.eps), ("lambda_mask", self.lambda_mask)] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(VleError::Config(format!("{key} must be finite and ≥ 0, got {v}")));
            }
        }
        for (key, v) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return Err(VleError::Config(format!("{key} must lie in [0, 1), got {v}")));
            }
        }
        let codec = self.codec_config();
        codec.validate()?;
        codec
            .token_shape(self.image_size, self.image_size)
            .map_err(|_| VleError::Config(format!("image_size {} is not divisible by {}", self.image_size, codec.stride())))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_round_trip() {
        let cfg = TrainConfig {
            mu_start: Some(1.5),
            data_root: Some("data/train".into()),
            lr: 3e-4,
            ..TrainConfig::masked()
        };
        let text = cfg.to_toml_string();
        assert_eq!(TrainConfig::from_toml_str(&text).unwrap(), cfg);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = TrainConfig::from_toml_str("n_cap = 4\nlearning_rate = 0.1\n").unwrap_err();
        assert!(err.to_string().contains("learning_rate"), "{err}");
    }

    #[test]
    fn masked_needs_two_tokens() {
        let err = TrainConfig::from_toml_str("variant = \"masked\"\nn_min = 1\n").unwrap_err();
        assert!(matches!(err, VleError::Config(_)));
        assert!(TrainConfig::from_toml_str("variant = \"masked\"\nn_min = 2\n").is_ok());
    }

    #[test]
    fn cosine_schedule_endpoints() {
        assert_eq!(LrSchedule::Constant.factor(7, 10), 1.0);
        assert_eq!(LrSchedule::Cosine.factor(0, 10), 1.0);
        assert!((LrSchedule::Cosine.factor(5, 10) - 0.5).abs() < 1e-12);
        assert!(LrSchedule::Cosine.factor(10, 10).abs() < 1e-12);
        assert!(LrSchedule::Cosine.factor(20, 10).abs() < 1e-12);
        let cfg = TrainConfig::from_toml_str("lr_schedule = \"cosine\"\n").unwrap();
        assert_eq!(cfg.lr_schedule, LrSchedule::Cosine);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(TrainConfig { image_size: 12, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { n_min: 6, ..TrainConfig::default() }.validate().is_err());
        assert!(TrainConfig { batch_size: 0, ..TrainConfig::default() }.validate().is_err());
    }
}
