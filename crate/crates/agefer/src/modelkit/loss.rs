//! Loss functions: weighted cross-entropy for expression classification and
//! the combined classification + density-weighted age-regression loss.

use ndarray::{Array1, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::Expression;
use crate::weighting::{DensityWeights, WeightTable};

/// Invertible affine map between years and model units. The default maps
/// years to [0, 1]-ish by dividing by 100, keeping the regression target and
/// the fusion scalar on the feature scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AgeNormalizer {
    pub scale: f64,
    pub offset: f64,
}

impl Default for AgeNormalizer {
    fn default() -> Self {
        AgeNormalizer {
            scale: 0.01,
            offset: 0.0,
        }
    }
}

impl AgeNormalizer {
    pub fn new(scale: f64, offset: f64) -> Result<Self> {
        if scale == 0.0 || !scale.is_finite() || !offset.is_finite() {
            return Err(Error::BadModelConfig(format!(
                "age normalizer must be invertible: scale {scale}, offset {offset}"
            )));
        }
        Ok(AgeNormalizer { scale, offset })
    }

    pub fn normalize(&self, years: f64) -> f64 {
        years * self.scale + self.offset
    }

    pub fn denormalize(&self, units: f64) -> f64 {
        (units - self.offset) / self.scale
    }
}

/// Everything the loss needs beyond the live batch: expression weights,
/// optional density weights for the age target, the CE/MSE mix, and the age
/// normalizer. Persisted into checkpoints for audit.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub expression_weights: WeightTable,
    pub density_weights: Option<DensityWeights>,
    pub lambda: Option<f64>,
    pub age_normalizer: AgeNormalizer,
}

impl LossSpec {
    pub fn new(
        expression_weights: WeightTable,
        density_weights: Option<DensityWeights>,
        lambda: Option<f64>,
        age_normalizer: AgeNormalizer,
    ) -> Result<Self> {
        if let Some(l) = lambda {
            if l < 0.0 || !l.is_finite() {
                return Err(Error::NegativeLambda(l));
            }
        }
        Ok(LossSpec {
            expression_weights,
            density_weights,
            lambda,
            age_normalizer,
        })
    }
}

fn log_sum_exp(logits: ArrayView1<f64>) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    m + logits.iter().map(|&z| (z - m).exp()).sum::<f64>().ln()
}

/// `weight × (logsumexp(logits) − logits[target])`, the weighted negative
/// log-softmax of the target class. Exactly linear in `weight`.
pub fn weighted_cross_entropy(logits: ArrayView1<f64>, target: Expression, weight: f64) -> Result<f64> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    Ok(weight * (log_sum_exp(logits) - logits[target.index()]))
}

/// Loss plus its gradient with respect to the logits:
/// `weight × (softmax(logits) − onehot(target))`.
pub fn weighted_cross_entropy_grad(logits: ArrayView1<f64>, target: Expression, weight: f64) -> Result<(f64, Array1<f64>)> {
    if logits.iter().any(|z| !z.is_finite()) {
        return Err(Error::NonFiniteLogits);
    }
    let lse = log_sum_exp(logits);
    let loss = weight * (lse - logits[target.index()]);
    let mut grad = Array1::from_iter(logits.iter().map(|&z| weight * (z - lse).exp()));
    grad[target.index()] -= weight;
    Ok((loss, grad))
}

/// Combined loss:
/// `weighted_cross_entropy + λ × density_weight × (age_pred − age_true)²`,
/// with `age_true` already in normalized units.
#[allow(clippy::too_many_arguments)]
pub fn multitask_loss(
    logits: ArrayView1<f64>,
    target: Expression,
    expr_weight: f64,
    age_pred: f64,
    age_true: f64,
    density_weight: f64,
    lambda: f64,
) -> Result<f64> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::NegativeLambda(lambda));
    }
    let ce = weighted_cross_entropy(logits, target, expr_weight)?;
    let residual = age_pred - age_true;
    Ok(ce + lambda * density_weight * residual * residual)
}

/// [`multitask_loss`] plus gradients with respect to the logits and to
/// `age_pred` (`2 λ d (age_pred − age_true)`).
#[allow(clippy::too_many_arguments)]
pub fn multitask_loss_grad(
    logits: ArrayView1<f64>,
    target: Expression,
    expr_weight: f64,
    age_pred: f64,
    age_true: f64,
    density_weight: f64,
    lambda: f64,
) -> Result<(f64, Array1<f64>, f64)> {
    if lambda < 0.0 || !lambda.is_finite() {
        return Err(Error::NegativeLambda(lambda));
    }
    let (ce, dlogits) = weighted_cross_entropy_grad(logits, target, expr_weight)?;
    let residual = age_pred - age_true;
    let loss = ce + lambda * density_weight * residual * residual;
    let dage = 2.0 * lambda * density_weight * residual;
    Ok((loss, dlogits, dage))
}
