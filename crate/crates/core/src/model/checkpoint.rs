//! Model checkpoints: config, vocabulary, named parameters, optimizer and
//! RNG state for exact resume, all behind a SHA-256 integrity digest.

use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{CoreError, Result};
use crate::numeric::AdamState;

use super::{Model, ModelConfig, ParamStore};

pub const CHECKPOINT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Optimizer state; present on checkpoints meant for resuming.
    pub optimizer: Option<AdamState>,
    /// Training RNG mid-stream state for bit-exact resume.
    pub rng: Option<ChaCha8Rng>,
    /// Completed training steps.
    pub step: u64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    digest: String,
    checkpoint: Checkpoint,
}

impl Checkpoint {
    pub fn model(&self) -> Model {
        Model {
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    fn digest(&self) -> Result<String> {
        let bytes =
            serde_json::to_vec(self).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
        let mut hasher = Sha256::new();
        hasher.update(&bytes);
        Ok(hex_string(&hasher.finalize()))
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<String> {
    let digest = ckpt.digest()?;
    let file = CheckpointFile {
        digest: digest.clone(),
        checkpoint: ckpt.clone(),
    };
    let bytes = serde_json::to_vec(&file).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    std::fs::write(path, bytes)?;
    Ok(digest)
}

/// Loads and verifies a checkpoint; returns it with its digest.
pub fn load_checkpoint(path: &Path) -> Result<(Checkpoint, String)> {
    let bytes = std::fs::read(path).map_err(|e| {
        CoreError::Checkpoint(format!("cannot read {}: {e}", path.display()))
    })?;
    let file: CheckpointFile =
        serde_json::from_slice(&bytes).map_err(|e| CoreError::Checkpoint(e.to_string()))?;
    if file.checkpoint.schema_version != CHECKPOINT_SCHEMA_VERSION {
        return Err(CoreError::Checkpoint(format!(
            "unsupported checkpoint schema {} (expected {CHECKPOINT_SCHEMA_VERSION})",
            file.checkpoint.schema_version
        )));
    }
    let recomputed = file.checkpoint.digest()?;
    if recomputed != file.digest {
        return Err(CoreError::Checkpoint(format!(
            "digest mismatch: stored {} recomputed {recomputed}",
            file.digest
        )));
    }
    file.checkpoint.config.validate()?;
    Ok((file.checkpoint, file.digest))
}
