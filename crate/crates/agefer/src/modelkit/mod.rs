//! Model construction: backbones, bias-mitigation variants, losses, and
//! checkpoint serialization.

mod backbone;
mod checkpoint;
mod layers;
mod loss;
mod variant;

pub use backbone::{make_reference_backbone, Backbone, BackboneConfig, FlattenBackbone, ParamReader, ReferenceCnn};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointMeta};
pub use layers::{Conv2d, Linear};
pub use loss::{
    multitask_loss, multitask_loss_grad, weighted_cross_entropy, weighted_cross_entropy_grad, AgeNormalizer, LossSpec,
};
pub use variant::{batch_argmax, predict_expression, ModelConfig, ModelVariant, VariantCache, VariantOutput};

use serde::{Deserialize, Serialize};

/// The four trainable model variants.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VariantKind {
    /// Class-weighted cross-entropy only.
    Baseline,
    /// Joint expression × age-group loss weighting.
    AgeWeighted,
    /// Auxiliary age-regression head with density-weighted squared error.
    MultiTask,
    /// Age scalar fused into the classifier input.
    MultiModal,
}

impl VariantKind {
    pub const ALL: [VariantKind; 4] = [
        VariantKind::Baseline,
        VariantKind::AgeWeighted,
        VariantKind::MultiTask,
        VariantKind::MultiModal,
    ];

    pub fn name(self) -> &'static str {
        match self {
            VariantKind::Baseline => "baseline",
            VariantKind::AgeWeighted => "age_weighted",
            VariantKind::MultiTask => "multi_task",
            VariantKind::MultiModal => "multi_modal",
        }
    }

    /// Whether this variant consumes the age scalar at inference time.
    pub fn wants_age_input(self) -> bool {
        matches!(self, VariantKind::MultiModal)
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for VariantKind {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "baseline" => Ok(VariantKind::Baseline),
            "age_weighted" | "age-weighted" => Ok(VariantKind::AgeWeighted),
            "multi_task" | "multi-task" => Ok(VariantKind::MultiTask),
            "multi_modal" | "multi-modal" => Ok(VariantKind::MultiModal),
            other => Err(crate::error::Error::BadModelConfig(format!(
                "unknown model variant: {other}"
            ))),
        }
    }
}
