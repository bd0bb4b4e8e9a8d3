//! Single-file checkpoints: parameters as safetensors, configuration and vocabulary in the header metadata.

use std::collections::HashMap;
use std::path::Path;

use candle_core::{DType, Device};
use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::vocab::Vocabulary;
use super::ProsodyModel;
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything besides the parameters needed to reuse a trained model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub vocabulary: Vocabulary,
    /// Speaker names in table order.
    pub speakers: Vec<String>,
    pub seed: u64,
    pub step: usize,
}

pub struct Checkpoint {
    pub model: ProsodyModel,
    pub meta: CheckpointMeta,
}

impl CheckpointMeta {
    pub fn speaker_index(&self, name: &str) -> Result<u32> {
        self.speakers
            .iter()
            .position(|s| s == name)
            .map(|i| i as u32)
            .ok_or_else(|| Error::UnknownSpeaker(name.to_string()))
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, model: &ProsodyModel, meta: &CheckpointMeta) -> Result<()> {
    let vars = model.vars();
    let tensors: Vec<(String, candle_core::Tensor)> = vars.iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect();
    let mut header = HashMap::new();
    header.insert("format_version".to_string(), CHECKPOINT_VERSION.to_string());
    header.insert("model_config".to_string(), serde_json::to_string(model.config())?);
    header.insert("meta".to_string(), serde_json::to_string(meta)?);
    header.insert("dtype".to_string(), format!("{:?}", model.dtype()));
    safetensors::serialize_to_file(tensors, Some(header), path.as_ref())
        .map_err(|e| Error::Checkpoint(format!("writing {}: {e}", path.as_ref().display())))
}

pub fn load_checkpoint(path: impl AsRef<Path>, device: &Device) -> Result<Checkpoint> {
    let path = path.as_ref();
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    let (_, st_meta) = safetensors::SafeTensors::read_metadata(&bytes)
        .map_err(|e| Error::Checkpoint(format!("reading {}: {e}", path.display())))?;
    let header = st_meta
        .metadata()
        .clone()
        .ok_or_else(|| Error::Checkpoint(format!("{} has no metadata header", path.display())))?;
    let field = |k: &str| header.get(k).ok_or_else(|| Error::Checkpoint(format!("{} lacks `{k}`", path.display())));
    let version: u32 = field("format_version")?
        .parse()
        .map_err(|_| Error::Checkpoint("unreadable format_version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported checkpoint version {version} (expected {CHECKPOINT_VERSION})")));
    }
    let cfg: ModelConfig = serde_json::from_str(field("model_config")?)?;
    let mut meta: CheckpointMeta = serde_json::from_str(field("meta")?)?;
    meta.vocabulary = meta.vocabulary.reindexed();
    let dtype = match field("dtype")?.as_str() {
        "F64" => DType::F64,
        _ => DType::F32,
    };
    let tensors = candle_core::safetensors::load_buffer(&bytes, device)?;
    let model = ProsodyModel::from_tensors(cfg, tensors, dtype, device)?;
    Ok(Checkpoint { model, meta })
}
