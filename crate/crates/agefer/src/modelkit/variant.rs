//! Assembly of the four model variants on top of a backbone, with batched
//! forward/backward passes over one flat parameter vector.

use ndarray::{Array1, Array2, Array4, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backbone::{make_reference_backbone, Backbone, BackboneConfig, ParamReader, ReferenceCnn};
use super::layers::Linear;
use super::VariantKind;
use crate::error::{Error, Result};
use crate::manifest::Expression;

/// Everything needed to (re)build a model deterministically.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub kind: VariantKind,
    pub backbone: BackboneConfig,
    /// Fused feature dimension D′ for the multi-modal variant; `None` means
    /// D/4.
    pub fuse_dim: Option<usize>,
}

impl ModelConfig {
    pub fn new(kind: VariantKind, backbone: BackboneConfig) -> Self {
        ModelConfig {
            kind,
            backbone,
            fuse_dim: None,
        }
    }
}

/// A backbone plus the heads its variant requires.
///
/// Flat parameter layout (used by `params`, `set_params`, and the gradient
/// vector from `backward`): backbone, then the fusion layer (multi-modal
/// only), then the expression head, then the age head (multi-task only);
/// each linear layer contributes weight then bias.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelVariant<B> {
    kind: VariantKind,
    backbone: B,
    fuse: Option<Linear>,
    expression_head: Linear,
    age_head: Option<Linear>,
}

/// Per-batch outputs: logits always; age predictions for multi-task only.
#[derive(Debug, Clone)]
pub struct VariantOutput {
    pub logits: Array2<f64>,
    pub age_pred: Option<Array1<f64>>,
}

/// Intermediate activations retained for the backward pass.
pub struct VariantCache<C> {
    backbone: C,
    features: Array2<f64>,
    /// Classifier input for the multi-modal variant (fused features with the
    /// age scalar appended); `None` for the other kinds, whose classifier
    /// input is `features`.
    classifier_in: Option<Array2<f64>>,
}

impl ModelVariant<ReferenceCnn> {
    /// Build a reference-CNN variant from a config. The head initialization
    /// stream is derived from the backbone seed, and the expression head is
    /// drawn first, so baseline, age_weighted, and multi_task share
    /// bit-identical backbone and expression-head initial parameters.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        let backbone = make_reference_backbone(&config.backbone)?;
        Self::with_backbone(config.kind, backbone, config.fuse_dim, config.backbone.init_seed)
    }
}

impl<B: Backbone> ModelVariant<B> {
    pub fn with_backbone(kind: VariantKind, backbone: B, fuse_dim: Option<usize>, init_seed: u64) -> Result<Self> {
        let d = backbone.feature_dim();
        let mut rng = ChaCha8Rng::seed_from_u64(init_seed ^ 0x9E37_79B9_7F4A_7C15);
        let (fuse, expression_head, age_head) = match kind {
            VariantKind::Baseline | VariantKind::AgeWeighted => {
                (None, Linear::he_init(Expression::COUNT, d, &mut rng), None)
            }
            VariantKind::MultiTask => {
                let expr = Linear::he_init(Expression::COUNT, d, &mut rng);
                let age = Linear::he_init(1, d, &mut rng);
                (None, expr, Some(age))
            }
            VariantKind::MultiModal => {
                let dp = fuse_dim.unwrap_or((d / 4).max(1));
                if dp == 0 || dp > d {
                    return Err(Error::BadModelConfig(format!(
                        "fuse dim {dp} must be in 1..={d} (feature dim)"
                    )));
                }
                let fuse = Linear::he_init(dp, d, &mut rng);
                let expr = Linear::he_init(Expression::COUNT, dp + 1, &mut rng);
                (Some(fuse), expr, None)
            }
        };
        Ok(ModelVariant {
            kind,
            backbone,
            fuse,
            expression_head,
            age_head,
        })
    }

    pub fn kind(&self) -> VariantKind {
        self.kind
    }

    pub fn backbone(&self) -> &B {
        &self.backbone
    }

    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    /// D′ for the multi-modal variant.
    pub fn fuse_dim(&self) -> Option<usize> {
        self.fuse.as_ref().map(|f| f.weight.nrows())
    }

    /// Classifier input width: D, or D′+1 for multi-modal.
    pub fn classifier_in_dim(&self) -> usize {
        self.expression_head.weight.ncols()
    }

    pub fn param_count(&self) -> usize {
        self.backbone.param_count()
            + self.fuse.as_ref().map_or(0, Linear::param_count)
            + self.expression_head.param_count()
            + self.age_head.as_ref().map_or(0, Linear::param_count)
    }

    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        self.backbone.write_params(&mut out);
        if let Some(fuse) = &self.fuse {
            out.extend(fuse.weight.iter());
            out.extend(fuse.bias.iter());
        }
        out.extend(self.expression_head.weight.iter());
        out.extend(self.expression_head.bias.iter());
        if let Some(age) = &self.age_head {
            out.extend(age.weight.iter());
            out.extend(age.bias.iter());
        }
        out
    }

    pub fn set_params(&mut self, flat: &[f64]) -> Result<()> {
        let mut reader = ParamReader::new(flat);
        self.backbone.read_params(&mut reader)?;
        let read_linear = |lin: &mut Linear, reader: &mut ParamReader| -> Result<()> {
            let dim = lin.weight.dim();
            lin.weight = Array2::from_shape_vec(dim, reader.take(lin.weight.len())?.to_vec()).unwrap();
            lin.bias = Array1::from_vec(reader.take(lin.bias.len())?.to_vec());
            Ok(())
        };
        if let Some(fuse) = &mut self.fuse {
            read_linear(fuse, &mut reader)?;
        }
        read_linear(&mut self.expression_head, &mut reader)?;
        if let Some(age) = &mut self.age_head {
            read_linear(age, &mut reader)?;
        }
        reader.finish()
    }

    /// Batched forward pass. `ages_norm` (normalized age scalars, one per
    /// batch row) is required for the multi-modal variant and rejected for
    /// every other kind.
    pub fn forward(&self, x: &Array4<f64>, ages_norm: Option<&Array1<f64>>) -> Result<(VariantOutput, VariantCache<B::Cache>)> {
        match (self.kind, ages_norm) {
            (VariantKind::MultiModal, None) => return Err(Error::MissingAgeInput(self.kind)),
            (VariantKind::MultiModal, Some(a)) if a.len() != x.dim().0 => {
                return Err(Error::BadModelConfig(format!(
                    "age input length {} != batch size {}",
                    a.len(),
                    x.dim().0
                )))
            }
            (k, Some(_)) if k != VariantKind::MultiModal => return Err(Error::UnexpectedAgeInput(self.kind)),
            _ => {}
        }

        let (features, backbone_cache) = self.backbone.forward(x);
        let (logits, age_pred, classifier_in) = match self.kind {
            VariantKind::Baseline | VariantKind::AgeWeighted => {
                (self.expression_head.forward(&features), None, None)
            }
            VariantKind::MultiTask => {
                let logits = self.expression_head.forward(&features);
                let age = self.age_head.as_ref().unwrap().forward(&features);
                (logits, Some(age.column(0).to_owned()), None)
            }
            VariantKind::MultiModal => {
                let fused = self.fuse.as_ref().unwrap().forward(&features);
                let ages = ages_norm.unwrap();
                let n = fused.nrows();
                let dp = fused.ncols();
                let mut cls_in = Array2::zeros((n, dp + 1));
                cls_in.slice_mut(ndarray::s![.., ..dp]).assign(&fused);
                cls_in.column_mut(dp).assign(ages);
                (self.expression_head.forward(&cls_in), None, Some(cls_in))
            }
        };
        Ok((
            VariantOutput { logits, age_pred },
            VariantCache {
                backbone: backbone_cache,
                features,
                classifier_in,
            },
        ))
    }

    /// Backward pass from cotangents on the logits (and, for multi-task, on
    /// the age predictions). Returns the flat parameter gradient, matching
    /// the `params()` layout, and optionally the input-image gradient.
    pub fn backward(
        &self,
        cache: &VariantCache<B::Cache>,
        dlogits: &Array2<f64>,
        dage_pred: Option<&Array1<f64>>,
        want_input_grad: bool,
    ) -> (Vec<f64>, Option<Array4<f64>>) {
        let (fuse_grads, eh_grads, age_grads, dfeatures) = match self.kind {
            VariantKind::Baseline | VariantKind::AgeWeighted => {
                let (dw, db, dfeat) = self.expression_head.backward(&cache.features, dlogits);
                (None, (dw, db), None, dfeat)
            }
            VariantKind::MultiTask => {
                let (dw, db, dfeat_expr) = self.expression_head.backward(&cache.features, dlogits);
                let age_head = self.age_head.as_ref().unwrap();
                let n = cache.features.nrows();
                let dage_mat = match dage_pred {
                    Some(v) => {
                        let mut m = Array2::zeros((n, 1));
                        m.column_mut(0).assign(v);
                        m
                    }
                    None => Array2::zeros((n, 1)),
                };
                let (daw, dab, dfeat_age) = age_head.backward(&cache.features, &dage_mat);
                (None, (dw, db), Some((daw, dab)), dfeat_expr + dfeat_age)
            }
            VariantKind::MultiModal => {
                let cls_in = cache.classifier_in.as_ref().unwrap();
                let (dw, db, dcls_in) = self.expression_head.backward(cls_in, dlogits);
                let dp = cls_in.ncols() - 1;
                // The age column is an input, not a parameter; its gradient
                // is dropped.
                let dfused = dcls_in.slice(ndarray::s![.., ..dp]).to_owned();
                let (dfw, dfb, dfeat) = self.fuse.as_ref().unwrap().backward(&cache.features, &dfused);
                (Some((dfw, dfb)), (dw, db), None, dfeat)
            }
        };

        let (backbone_grads, dinput) = self.backbone.backward(&cache.backbone, &dfeatures, want_input_grad);

        let mut flat = Vec::with_capacity(self.param_count());
        flat.extend(backbone_grads);
        if let Some((dw, db)) = &fuse_grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        flat.extend(eh_grads.0.iter());
        flat.extend(eh_grads.1.iter());
        if let Some((dw, db)) = &age_grads {
            flat.extend(dw.iter());
            flat.extend(db.iter());
        }
        debug_assert_eq!(flat.len(), self.param_count());
        (flat, dinput)
    }

    /// Logits for a single image (batch of one), for evaluation and
    /// explanation paths.
    pub fn forward_single(&self, image: &Array2<f64>, age_norm: Option<f64>) -> Result<VariantOutput> {
        let (h, w) = image.dim();
        let x = image
            .view()
            .into_shape_with_order((1, 1, h, w))
            .expect("standard layout")
            .to_owned();
        let ages = age_norm.map(|a| Array1::from_vec(vec![a]));
        let (out, _) = self.forward(&x, ages.as_ref())?;
        Ok(out)
    }
}

/// Argmax over a logits row.
pub fn predict_expression(logits: &Array1<f64>) -> Expression {
    let mut best = 0;
    for i in 1..logits.len() {
        if logits[i] > logits[best] {
            best = i;
        }
    }
    Expression::from_index(best).expect("7 logits")
}

/// Batch accuracy helper used by validation.
pub fn batch_argmax(logits: &Array2<f64>) -> Vec<Expression> {
    logits
        .axis_iter(Axis(0))
        .map(|row| predict_expression(&row.to_owned()))
        .collect()
}
