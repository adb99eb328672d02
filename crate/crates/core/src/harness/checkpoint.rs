//! Checkpoints: full training state as one JSON document. Loading and
//! re-saving reproduces the file byte-for-byte (fixed field order, exact
//! float round-trips), which the resumption tests rely on.

use std::path::Path;

use super::{optim::AdamState, HarnessError, RunConfig};
use crate::autodiff::ParamSet;
use crate::diffusion::Normalizer;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    pub epoch: usize,
    pub params: ParamSet,
    pub optimizer: AdamState,
    pub normalizer: Normalizer,
    /// Training RNG state at the end of `epoch`.
    pub rng_state: u64,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<(), HarnessError> {
        let body =
            serde_json::to_vec(self).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        std::fs::write(path, body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint, HarnessError> {
        let body = std::fs::read(path)?;
        let mut ckpt: Checkpoint =
            serde_json::from_slice(&body).map_err(|e| HarnessError::Checkpoint(e.to_string()))?;
        if ckpt.version != CHECKPOINT_VERSION {
            return Err(HarnessError::Checkpoint(format!(
                "unsupported checkpoint version {} (expected {CHECKPOINT_VERSION})",
                ckpt.version
            )));
        }
        ckpt.params.reindex();
        Ok(ckpt)
    }
}

/// `ckpt_epoch_<n>.json` inside a run directory.
pub fn checkpoint_path(dir: &Path, epoch: usize) -> std::path::PathBuf {
    dir.join(format!("ckpt_epoch_{epoch:05}.json"))
}

/// All checkpoints in a run directory, ascending by epoch.
pub fn list_checkpoints(dir: &Path) -> Result<Vec<(usize, std::path::PathBuf)>, HarnessError> {
    let mut out = Vec::new();
    for entry in std::fs::read_dir(dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(num) = name
            .strip_prefix("ckpt_epoch_")
            .and_then(|s| s.strip_suffix(".json"))
        {
            if let Ok(epoch) = num.parse::<usize>() {
                out.push((epoch, entry.path()));
            }
        }
    }
    out.sort();
    Ok(out)
}
