//! Operational surface: run configuration, training loop, evaluation
//! protocol, equivariance audit, checkpointing, and metric/plot emission.
//! The CLI is a thin wrapper over these functions; everything here is
//! file-driven and seeded.

pub mod checkpoint;
pub mod data;
pub mod equicheck;
pub mod eval;
pub mod optim;
pub mod plot;
pub mod train;

use std::path::Path;

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::diffusion::SamplerKind;
use crate::policy::{ModelKind, PolicyConfig};
use crate::pusht::PushTConfig;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("config: {0}")]
    Config(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error("demo/config mismatch: {0}")]
    DemoMismatch(String),
    #[error(transparent)]
    Policy(#[from] crate::policy::PolicyError),
    #[error(transparent)]
    Diffusion(#[from] crate::diffusion::DiffusionError),
    #[error(transparent)]
    PushT(#[from] crate::pusht::PushTError),
    #[error(transparent)]
    Ad(#[from] crate::autodiff::AdError),
}

/// Model variant: the equivariant policy, the plain diffusion-policy
/// baseline, or the baseline trained with similarity augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum Variant {
    #[serde(rename = "equibot")]
    Equibot,
    #[serde(rename = "dp-baseline")]
    DpBaseline,
    #[serde(rename = "dp-baseline+aug")]
    DpBaselineAug,
}

impl Variant {
    pub fn model_kind(&self) -> ModelKind {
        match self {
            Variant::Equibot => ModelKind::Equi,
            Variant::DpBaseline | Variant::DpBaselineAug => ModelKind::Plain,
        }
    }

    /// Whether training applies the per-sample similarity augmentation.
    pub fn augmented(&self) -> bool {
        matches!(self, Variant::DpBaselineAug)
    }

    pub fn tag(&self) -> &'static str {
        match self {
            Variant::Equibot => "equibot",
            Variant::DpBaseline => "dp-baseline",
            Variant::DpBaselineAug => "dp-baseline+aug",
        }
    }

    pub fn parse(tag: &str) -> Result<Variant, HarnessError> {
        match tag {
            "equibot" => Ok(Variant::Equibot),
            "dp-baseline" => Ok(Variant::DpBaseline),
            "dp-baseline+aug" => Ok(Variant::DpBaselineAug),
            other => Err(HarnessError::Config(format!("unknown variant: {other}"))),
        }
    }
}

/// Full run configuration; serialized into every checkpoint and metrics
/// file.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunConfig {
    pub variant: Variant,
    pub seed: u64,
    /// Number of scripted demos to generate/train on.
    pub demos: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub checkpoint_interval: usize,
    /// Stride between training-window start indices.
    pub window_stride: usize,
    /// DDPM steps K used for training and the stochastic sampler.
    pub diffusion_steps: usize,
    /// Sampler used at evaluation time.
    pub sampler: SamplerKind,
    pub eval_episodes: usize,
    pub task: PushTConfig,
    pub policy: PolicyConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        // Desk-scale defaults; the 2,000-epoch protocol remains a config
        // option.
        RunConfig {
            variant: Variant::Equibot,
            seed: 0,
            demos: 25,
            epochs: 300,
            batch_size: 64,
            learning_rate: 1e-4,
            checkpoint_interval: 50,
            window_stride: 2,
            diffusion_steps: 100,
            sampler: SamplerKind::Ddim { steps: 8 },
            eval_episodes: 10,
            task: PushTConfig::default(),
            policy: PolicyConfig::pusht_default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig, HarnessError> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn canonical_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        std::fs::write(path, self.canonical_toml())?;
        Ok(())
    }

    /// First eight bytes of the SHA-256 of the canonical TOML.
    pub fn hash(&self) -> u64 {
        let digest = Sha256::digest(self.canonical_toml().as_bytes());
        u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
    }
}
