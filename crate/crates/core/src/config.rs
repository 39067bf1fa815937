//! Flat `key = value` training configuration.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::critic::{CriticConfig, QMode};
use crate::error::{invalid, Result};
use crate::generator::{GeneratorConfig, InputBlock};
use crate::latent::SamplingSchedule;
use crate::objectives::{CosineSign, LossWeights};
use crate::optim::AdamConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub iterations: u64,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub lambda: f64,
    pub gamma: f64,
    pub ortho_weight: f64,
    pub ortho_sign: CosineSign,
    pub onehot_period: u64,
    pub onehot_phase: u64,
    pub q_mode: QMode,
    pub instance_noise_sigma0: f64,
    /// Defaults to `iterations / 2` when absent.
    pub anneal_end_iter: Option<u64>,
    pub seed: u64,
    pub disable_onehot: bool,
    pub disable_ortho: bool,
    pub disable_competefree_g: bool,
    pub snapshot_every: u64,
    pub log_every: u64,
    pub spectral_norm_enabled: bool,
    /// Let the MI step also update the shared critic trunk.
    pub mi_updates_trunk: bool,
    pub strict: bool,
    pub d: usize,
    pub n_z: usize,
    pub img_size: usize,
    pub img_channels: usize,
    /// Generator widths; derived from `img_size` when absent.
    pub g_channels: Option<Vec<usize>>,
    /// Critic trunk widths; derived from `img_size` when absent.
    pub d_channels: Option<Vec<usize>>,
    pub q_branch_level: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            iterations: 50_000,
            learning_rate: 1e-4,
            adam_beta1: 0.5,
            adam_beta2: 0.99,
            lambda: 1.0,
            gamma: 1.0,
            ortho_weight: 1.0,
            ortho_sign: CosineSign::Absolute,
            onehot_period: 2,
            onehot_phase: 1,
            q_mode: QMode::Deterministic,
            instance_noise_sigma0: 0.1,
            anneal_end_iter: None,
            seed: 0,
            disable_onehot: false,
            disable_ortho: false,
            disable_competefree_g: false,
            snapshot_every: 5_000,
            log_every: 1,
            spectral_norm_enabled: true,
            mi_updates_trunk: false,
            strict: true,
            d: 10,
            n_z: 100,
            img_size: 64,
            img_channels: 1,
            g_channels: None,
            d_channels: None,
            q_branch_level: 2,
        }
    }
}

/// Generator widths for an image size, following the 64px table.
pub fn default_g_channels(img_size: usize) -> Vec<usize> {
    let n = (img_size.trailing_zeros() as usize).saturating_sub(1);
    if n == 5 {
        return vec![512, 256, 256, 128, 64];
    }
    (0..n).map(|k| (512usize >> k).max(64)).collect()
}

/// Critic trunk widths (stem first) for an image size, following the 64px table.
pub fn default_d_channels(img_size: usize) -> Vec<usize> {
    let n = (img_size.trailing_zeros() as usize).saturating_sub(1);
    if n == 5 {
        return vec![64, 128, 256, 256, 512];
    }
    (0..n).map(|k| (64usize << k).min(512)).collect()
}

impl TrainConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// All four modules off: the plain InfoGAN-style baseline.
    pub fn baseline(mut self) -> Self {
        self.disable_onehot = true;
        self.disable_ortho = true;
        self.disable_competefree_g = true;
        self
    }

    /// 32x32 narrow-network preset for CPU runs.
    pub fn desk_scale() -> Self {
        Self {
            batch_size: 32,
            iterations: 2_000,
            learning_rate: 2e-4,
            img_size: 32,
            img_channels: 1,
            d: 4,
            n_z: 16,
            g_channels: Some(vec![64, 32, 32, 16]),
            d_channels: Some(vec![16, 32, 64, 128]),
            snapshot_every: 500,
            log_every: 10,
            ..Self::default()
        }
    }

    pub fn anneal_end(&self) -> u64 {
        self.anneal_end_iter.unwrap_or(self.iterations / 2)
    }

    /// Weights with the ablation flags applied.
    pub fn loss_weights(&self) -> LossWeights {
        LossWeights {
            lambda: self.lambda,
            gamma: self.gamma,
            ortho_weight: if self.disable_ortho { 0.0 } else { self.ortho_weight },
        }
    }

    pub fn schedule(&self) -> Result<SamplingSchedule> {
        if self.disable_onehot {
            Ok(SamplingSchedule::continuous_only())
        } else {
            SamplingSchedule::new(self.onehot_period, self.onehot_phase)
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            ..AdamConfig::default()
        }
    }

    pub fn generator_config(&self) -> GeneratorConfig {
        GeneratorConfig {
            d: self.d,
            n_z: self.n_z,
            img_size: self.img_size,
            img_channels: self.img_channels,
            channel_schedule: self.g_channels.clone().unwrap_or_else(|| default_g_channels(self.img_size)),
            input_block: if self.disable_competefree_g {
                InputBlock::Concat
            } else {
                InputBlock::CompeteFree
            },
        }
    }

    pub fn critic_config(&self) -> CriticConfig {
        CriticConfig {
            d: self.d,
            img_size: self.img_size,
            img_channels: self.img_channels,
            trunk_channels: self.d_channels.clone().unwrap_or_else(|| default_d_channels(self.img_size)),
            q_branch_level: self.q_branch_level,
            q_mode: self.q_mode,
            spectral_norm: self.spectral_norm_enabled,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return invalid(format!("batch_size must be >= 2, got {}", self.batch_size));
        }
        if self.iterations < 1 {
            return invalid("iterations must be >= 1");
        }
        if !(self.learning_rate > 0.0) {
            return invalid(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.instance_noise_sigma0 >= 0.0) {
            return invalid("instance_noise_sigma0 must be nonnegative");
        }
        if self.log_every == 0 || self.snapshot_every == 0 {
            return invalid("log_every and snapshot_every must be >= 1");
        }
        self.loss_weights().validate()?;
        self.schedule()?;
        crate::optim::Adam::new(self.adam())?;
        self.generator_config().validate()?;
        self.critic_config().validate()?;
        Ok(())
    }
}
