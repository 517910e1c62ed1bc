//! Run configuration: one TOML file with sections, unknown keys rejected.

use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::{DdmSetup, ScheduleSpec};
use crate::error::{config_err, Result};
use crate::losses::{LossMode, LossWeights};
use crate::model::ModelConfig;
use crate::rdc::RdcConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Stage-1 optimizer steps (composite losses).
    pub k1: usize,
    /// Stage-2 optimizer steps (duplex diffusion).
    pub k2: usize,
    /// Stage-3 optimizer steps (composite losses, diffusion frozen).
    pub k3: usize,
    pub lr: f64,
    /// Linear warmup length; inverse-square-root decay afterwards.
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm clip; 0 disables clipping.
    pub clip_norm: f64,
    /// Source plus target units per batch.
    pub batch_tokens: usize,
    pub mode: LossMode,
    pub weights: LossWeights,
    /// Add the composite losses (weight 1) to the stage-2 objective.
    pub stage2_composite: bool,
    pub log_interval: usize,
    /// Held-out evaluation and checkpoint interval.
    pub eval_interval: usize,
    /// Held-out pairs used by periodic evaluation.
    pub eval_pairs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k1: 3000,
            k2: 3000,
            k3: 1000,
            lr: 3e-4,
            warmup: 200,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            batch_tokens: 512,
            mode: LossMode::Unit,
            weights: LossWeights::default(),
            stage2_composite: false,
            log_interval: 10,
            eval_interval: 500,
            eval_pairs: 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionConfig {
    /// Schedule of the X-side process.
    pub schedule_x: ScheduleSpec,
    /// Schedule of the Y-side process.
    pub schedule_y: ScheduleSpec,
    /// Weight of X-side noise prediction (reverse-direction denoiser).
    pub lambda1: f64,
    /// Weight of Y-side noise prediction (forward-direction denoiser).
    pub lambda2: f64,
    /// Fixed-noise draws per held-out batch when estimating L_DDM.
    pub eval_draws: usize,
}

impl Default for DiffusionConfig {
    fn default() -> Self {
        DiffusionConfig {
            schedule_x: ScheduleSpec::DESK,
            schedule_y: ScheduleSpec::DESK,
            lambda1: 1.0,
            lambda2: 1.0,
            eval_draws: 8,
        }
    }
}

impl DiffusionConfig {
    pub fn setup(&self) -> Result<DdmSetup> {
        DdmSetup::new(self.schedule_x.build()?, self.schedule_y.build()?, self.lambda1, self.lambda2)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Per-mille of source hashes held out for evaluation during training.
    pub dev_permille: u64,
    /// Per-mille of source hashes reserved for final testing.
    pub test_permille: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            dev_permille: 50,
            test_permille: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub diffusion: DiffusionConfig,
    pub data: DataConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            diffusion: DiffusionConfig::default(),
            data: DataConfig::default(),
        }
    }
}

impl RunConfig {
    /// Full-scale budgets and model shape.
    pub fn full_scale() -> Self {
        RunConfig {
            model: ModelConfig {
                vocab_x: 100,
                vocab_y: 100,
                stack: RdcConfig::full_scale(),
                ..ModelConfig::default()
            },
            train: TrainConfig {
                k1: 200_000,
                k2: 200_000,
                k3: 20_000,
                batch_tokens: 8192,
                ..TrainConfig::default()
            },
            diffusion: DiffusionConfig {
                schedule_x: ScheduleSpec::REFERENCE,
                schedule_y: ScheduleSpec::REFERENCE,
                ..DiffusionConfig::default()
            },
            ..RunConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.weights.validate()?;
        self.diffusion.setup()?;
        let t = &self.train;
        if !(t.lr > 0.0 && t.lr.is_finite()) {
            return Err(config_err(format!("learning rate {} must be positive", t.lr)));
        }
        if !(0.0..1.0).contains(&t.beta1) || !(0.0..1.0).contains(&t.beta2) || t.adam_eps <= 0.0 {
            return Err(config_err("Adam betas must lie in [0, 1) and eps must be positive"));
        }
        if t.clip_norm < 0.0 || t.batch_tokens == 0 || t.log_interval == 0 || t.eval_interval == 0 {
            return Err(config_err("clip_norm, batch_tokens and intervals must be positive"));
        }
        if self.data.dev_permille + self.data.test_permille > 1000 {
            return Err(config_err("dev and test fractions exceed the corpus"));
        }
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| config_err(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config is representable as TOML")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml())?;
        Ok(())
    }

    /// SHA-256 of the canonical JSON serialization.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(json))
    }
}
