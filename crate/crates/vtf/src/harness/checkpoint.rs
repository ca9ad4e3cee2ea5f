//! Checkpoint directory layout and bookkeeping shared by the trainers.
//!
//! A checkpoint directory holds the model tensors, optimizer moments, the
//! producing config, and a JSON meta record. Restoring replaces parameters
//! by name with shape checks, so a resumed run continues bit-identically.

use super::config::{TrainConfig, Variant};
use super::optim::ScalerState;
use crate::blocks::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::{Path, PathBuf};

/// File names inside a checkpoint directory.
pub const META_FILE: &str = "meta.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const GENERATOR_FILE: &str = "generator.bin";
pub const GENERATOR_ADAM_FILE: &str = "generator.adam";
pub const DISCRIMINATOR_FILE: &str = "discriminator.bin";
pub const DISCRIMINATOR_ADAM_FILE: &str = "discriminator.adam";
pub const DISC_BUFFERS_FILE: &str = "disc_buffers.bin";
pub const DENOISER_FILE: &str = "denoiser.bin";
pub const DENOISER_ADAM_FILE: &str = "denoiser.adam";

/// Progress counters and integrity handles for a saved run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub variant: Variant,
    /// Completed optimization steps (1-based count).
    pub step: u64,
    pub epoch: u64,
    /// Position inside the current epoch's visit order.
    pub pos_in_epoch: usize,
    pub seed: u64,
    /// Hash of the full producing config (for reports).
    pub config_hash: String,
    /// Hash of the state-bearing config fields (checked on resume).
    pub state_signature: String,
    /// Loss-scaler states: `[generator, discriminator]` or `[denoiser]`.
    pub scalers: Vec<ScalerState>,
}

impl CheckpointMeta {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let path = dir.join(META_FILE);
        let text = serde_json::to_string_pretty(self)?;
        fs::write(&path, text).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(META_FILE);
        let text =
            fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Refuses to resume into a config whose training state would diverge
    /// from the one that wrote the checkpoint.
    pub fn check_resumable(&self, config: &TrainConfig) -> Result<()> {
        if self.variant != config.variant {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained as {}, config asks for {}",
                self.variant, config.variant
            )));
        }
        if self.state_signature != config.state_signature() {
            return Err(Error::Checkpoint(
                "checkpoint and config disagree on model/data/optimizer settings \
                 (only out_dir, epochs, max_steps, and checkpoint_every may differ)"
                    .into(),
            ));
        }
        Ok(())
    }
}

/// Creates the directory (and parents) if needed.
pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

/// Standard location of the checkpoint written after step `step`.
pub fn step_dir(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join("checkpoints").join(format!("step_{step:06}"))
}

/// Overwrites every tensor in `dst` with the identically named tensor from a
/// saved store; missing names or shape changes are errors.
pub fn restore_params<S: Scalar>(dst: &mut ParamStore<S>, path: &Path) -> Result<()> {
    let loaded = ParamStore::<S>::load(path)?;
    if loaded.len() != dst.len() {
        return Err(Error::Checkpoint(format!(
            "{} holds {} tensors, model has {}",
            path.display(),
            loaded.len(),
            dst.len()
        )));
    }
    for i in 0..dst.len() {
        let name = dst.name(i).to_string();
        let id = loaded
            .find(&name)
            .ok_or_else(|| Error::Checkpoint(format!("{} is missing {name}", path.display())))?;
        let arr = loaded.get(id);
        if arr.shape() != dst.array(i).shape() {
            return Err(Error::Checkpoint(format!(
                "{name} has shape {:?} on disk, model expects {:?}",
                arr.shape(),
                dst.array(i).shape()
            )));
        }
        dst.set(ParamId(i), arr.clone());
    }
    Ok(())
}
