//! Self-describing checkpoints: one safetensors file whose header metadata
//! carries the full experiment config and every network spec, so a model can
//! be rebuilt without the original config file.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use super::{DenoiserSpec, DiffusionSchedule, DiscriminatorSpec, GeneratorSpec, ModelError};

pub const CHECKPOINT_FORMAT: &str = "vstain-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    /// Experiment config as JSON.
    pub config: serde_json::Value,
    pub config_hash: String,
    pub generator: Option<GeneratorSpec>,
    pub discriminator: Option<DiscriminatorSpec>,
    pub denoiser: Option<DenoiserSpec>,
    pub schedule: Option<DiffusionSchedule>,
    pub channel_names: Vec<String>,
    pub nuclear_channel: usize,
    pub epoch: usize,
    pub val_loss: Option<f64>,
}

impl CheckpointMeta {
    pub fn new(config: serde_json::Value, config_hash: String, channel_names: Vec<String>, nuclear_channel: usize) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config,
            config_hash,
            generator: None,
            discriminator: None,
            denoiser: None,
            schedule: None,
            channel_names,
            nuclear_channel,
            epoch: 0,
            val_loss: None,
        }
    }
}

const META_KEY: &str = "vstain";

/// Writes `weights` with `meta` embedded in the header. The write goes to a
/// sibling temp file first so an interrupted save never clobbers a good one.
pub fn save_checkpoint(path: &Path, weights: &HashMap<String, Tensor>, meta: &CheckpointMeta) -> Result<(), ModelError> {
    let json = serde_json::to_string(meta).map_err(|e| ModelError::Checkpoint(e.to_string()))?;
    let mut header = HashMap::new();
    header.insert(META_KEY.to_string(), json);
    let mut entries: Vec<(&String, &Tensor)> = weights.iter().collect();
    entries.sort_by(|a, b| a.0.cmp(b.0));
    let tmp = path.with_extension("safetensors.tmp");
    safetensors::serialize_to_file(entries, Some(header), &tmp)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    Ok(())
}

pub fn read_checkpoint_meta(path: &Path) -> Result<CheckpointMeta, ModelError> {
    let bytes = std::fs::read(path).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let (_, header) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    let json = header
        .metadata()
        .as_ref()
        .and_then(|m| m.get(META_KEY))
        .ok_or_else(|| ModelError::Checkpoint(format!("{}: missing metadata", path.display())))?;
    let meta: CheckpointMeta =
        serde_json::from_str(json).map_err(|e| ModelError::Checkpoint(format!("{}: {e}", path.display())))?;
    if meta.format != CHECKPOINT_FORMAT || meta.version != CHECKPOINT_VERSION {
        return Err(ModelError::Checkpoint(format!(
            "{}: unsupported checkpoint {} v{}",
            path.display(),
            meta.format,
            meta.version
        )));
    }
    Ok(meta)
}

pub fn load_checkpoint(path: &Path, device: &Device) -> Result<(HashMap<String, Tensor>, CheckpointMeta), ModelError> {
    let mut meta = read_checkpoint_meta(path)?;
    if let Some(s) = &meta.schedule {
        meta.schedule = Some(s.rebuilt()?);
    }
    let weights = candle_core::safetensors::load(path, device)?;
    Ok((weights, meta))
}
