//! Training configuration and named presets.
//!
//! The on-disk form is TOML; every field is required and unknown keys are
//! rejected.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::assignment::SinkhornConfig;
use crate::augment::{AugmentationPolicy, InputKind, PolicyKind};
use crate::encoder::{Activation, Architecture};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub model: ModelConfig,
    pub task: TaskConfig,
    pub optim: OptimConfig,
    pub sinkhorn: SinkhornConfig,
    pub augment: AugmentConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Width of both backbone hidden layers.
    pub backbone_hidden: usize,
    /// Hidden width of projector and predictor.
    pub head_hidden: usize,
    /// Representation dimension `d`.
    pub embed_dim: usize,
    pub activation: Activation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskConfig {
    /// Batch size, i.e. ways of each pseudo-task (`N`).
    pub batch_size: usize,
    /// Shots per pseudo-label (`K`).
    pub shots: usize,
    /// Queue capacity (`M`).
    pub queue_size: usize,
    pub tau_psco: f64,
    pub tau_moco: f64,
    /// EMA coefficient `m` of the momentum network.
    pub ema_momentum: f64,
    /// Ablation switch: `false` selects supports by raw-similarity top-K.
    pub use_sinkhorn: bool,
    /// Ablation switch: `false` computes keys with the online `g_θ ∘ f_θ`.
    pub momentum_network: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    /// Initial learning rate of the cosine schedule.
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub weak: AugmentationPolicy,
    pub strong: AugmentationPolicy,
}

pub const PRESETS: [&str; 3] = ["desk", "paper-omniglot", "paper-miniimagenet"];

impl TrainConfig {
    /// Small vector-input configuration that trains in minutes on one core.
    pub fn desk() -> Self {
        Self {
            seed: 0,
            epochs: 50,
            model: ModelConfig {
                backbone_hidden: 64,
                head_hidden: 64,
                embed_dim: 32,
                activation: Activation::Relu,
            },
            task: TaskConfig {
                batch_size: 64,
                shots: 4,
                queue_size: 1024,
                tau_psco: 1.0,
                tau_moco: 0.2,
                ema_momentum: 0.99,
                use_sinkhorn: true,
                momentum_network: true,
            },
            optim: OptimConfig {
                lr: 0.03,
                weight_decay: 5e-4,
                momentum: 0.9,
            },
            sinkhorn: SinkhornConfig {
                epsilon: 0.01,
                ..SinkhornConfig::default()
            },
            augment: AugmentConfig {
                weak: AugmentationPolicy::weak(0.05),
                strong: AugmentationPolicy::strong(0.15, 0.2),
            },
        }
    }

    fn paper(shots: usize) -> Self {
        let mut c = Self::desk();
        c.epochs = 400;
        c.model = ModelConfig {
            backbone_hidden: 256,
            head_hidden: 2048,
            embed_dim: 128,
            activation: Activation::Relu,
        };
        c.task.batch_size = 256;
        c.task.shots = shots;
        c.task.queue_size = 16384;
        c
    }

    /// Full-scale hyperparameters for the 28×28 grayscale benchmark
    /// (`K = 1`; strong and weak views are both crop + flip).
    pub fn paper_omniglot() -> Self {
        let mut c = Self::paper(1);
        let geometric = AugmentationPolicy {
            noise_sigma: 0.0,
            ..AugmentationPolicy::weak(0.0)
        };
        c.augment = AugmentConfig {
            weak: geometric,
            strong: AugmentationPolicy {
                kind: PolicyKind::Strong,
                ..geometric
            },
        };
        c
    }

    /// Full-scale hyperparameters for the 84×84 natural-image benchmark (`K = 4`).
    pub fn paper_miniimagenet() -> Self {
        let mut c = Self::paper(4);
        c.augment = AugmentConfig {
            weak: AugmentationPolicy::weak(0.0),
            strong: AugmentationPolicy::strong(0.0, 0.0),
        };
        c
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(Self::desk()),
            "paper-omniglot" => Ok(Self::paper_omniglot()),
            "paper-miniimagenet" => Ok(Self::paper_miniimagenet()),
            other => Err(Error::Config(format!(
                "unknown preset {other:?}; expected one of {PRESETS:?}"
            ))),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.task;
        if t.batch_size == 0 || t.shots == 0 {
            return Err(Error::Config("batch size and shots must be positive".into()));
        }
        if t.batch_size > t.queue_size || t.shots > t.queue_size {
            return Err(Error::Config(format!(
                "N = {} and K = {} must not exceed M = {}",
                t.batch_size, t.shots, t.queue_size
            )));
        }
        if !(t.tau_psco > 0.0) || !(t.tau_moco > 0.0) {
            return Err(Error::Config("temperatures must be positive".into()));
        }
        if !(0.0..=1.0).contains(&t.ema_momentum) {
            return Err(Error::Config(format!(
                "ema_momentum = {} outside [0, 1]",
                t.ema_momentum
            )));
        }
        if !(self.optim.lr > 0.0) {
            return Err(Error::Config(format!("lr = {} must be positive", self.optim.lr)));
        }
        if !(self.optim.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.optim.momentum) {
            return Err(Error::Config(
                "weight_decay must be ≥ 0 and SGD momentum in [0, 1)".into(),
            ));
        }
        if self.model.embed_dim < 2 {
            return Err(Error::Config("embed_dim must be at least 2".into()));
        }
        self.sinkhorn.validate()?;
        if self.augment.weak.kind != PolicyKind::Weak || self.augment.strong.kind != PolicyKind::Strong {
            return Err(Error::Config(
                "augment.weak must be a weak policy and augment.strong a strong one".into(),
            ));
        }
        self.augment.weak.validate()?;
        self.augment.strong.validate()?;
        if self.augment.weak.noise_sigma > self.augment.strong.noise_sigma {
            return Err(Error::Config("weak noise must not exceed strong noise".into()));
        }
        Ok(())
    }

    pub fn architecture(&self, input: InputKind) -> Architecture {
        let m = &self.model;
        Architecture {
            activation: m.activation,
            ..Architecture::desk(input.dim(), m.backbone_hidden, m.head_hidden, m.embed_dim)
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Hash of the canonical TOML form, excluding `epochs` so a run can be
    /// extended without invalidating its snapshots.
    pub fn fingerprint(&self) -> u64 {
        let mut c = self.clone();
        c.epochs = 0;
        let digest = Sha256::digest(c.to_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
