//! Self-describing model checkpoints: variant kind, backbone config,
//! parameter blob, and the loss spec used for training — everything needed
//! to reload for evaluation and explanation without the training config.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::loss::LossSpec;
use super::variant::{ModelConfig, ModelVariant};
use super::ReferenceCnn;
use crate::error::{Error, Result};

const FORMAT_TAG: &str = "agefer-checkpoint-v1";

/// Training provenance stored next to the parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CheckpointMeta {
    pub fold: u32,
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// On-disk checkpoint contents.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub model: ModelConfig,
    pub params: Vec<f64>,
    pub loss_spec: Option<LossSpec>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn from_variant(
        variant: &ModelVariant<ReferenceCnn>,
        loss_spec: Option<LossSpec>,
        meta: CheckpointMeta,
    ) -> Self {
        let model = ModelConfig {
            kind: variant.kind(),
            backbone: variant.backbone().config().clone(),
            fuse_dim: variant.fuse_dim(),
        };
        Checkpoint {
            format: FORMAT_TAG.to_string(),
            model,
            params: variant.params(),
            loss_spec,
            meta,
        }
    }

    /// Rebuild the model this checkpoint describes.
    pub fn instantiate(&self) -> Result<ModelVariant<ReferenceCnn>> {
        if self.format != FORMAT_TAG {
            return Err(Error::CheckpointMismatch {
                expected: FORMAT_TAG.to_string(),
                found: self.format.clone(),
            });
        }
        let mut variant = ModelVariant::build(&self.model)?;
        variant.set_params(&self.params)?;
        Ok(variant)
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, checkpoint: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::to_writer(std::io::BufWriter::new(file), checkpoint)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let checkpoint: Checkpoint = serde_json::from_reader(std::io::BufReader::new(file))?;
    if checkpoint.format != FORMAT_TAG {
        return Err(Error::CheckpointMismatch {
            expected: FORMAT_TAG.to_string(),
            found: checkpoint.format,
        });
    }
    Ok(checkpoint)
}
