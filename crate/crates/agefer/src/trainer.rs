//! Cross-validated training: dataset preparation, per-fold loss weighting,
//! Adam optimization, early stopping on validation accuracy, and best-epoch
//! checkpointing. Everything is deterministic given the config seed.

use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use ndarray::{Array1, Array2, Array4, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::manifest::{assign_folds, DatasetManifest, Expression, SampleRecord, Split};
use crate::metrics::Prediction;
use crate::modelkit::{
    multitask_loss_grad, save_checkpoint, weighted_cross_entropy_grad, AgeNormalizer, BackboneConfig, Checkpoint,
    CheckpointMeta, LossSpec, ModelConfig, ModelVariant, ReferenceCnn, VariantKind,
};
use crate::preprocess::{
    augment, fnv1a64, preprocess, AugmentPolicy, DetectorAdapters, FaceImage, ImageStore, PreprocessConfig,
    TensorCache,
};
use crate::weighting::{
    compute_class_weights, compute_density_weights, compute_joint_weights, silverman_bandwidth, WeightTable,
};

/// How per-sample loss weights are derived from the fold's training split.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightStrategy {
    /// Every sample weighs 1 (the unweighted baseline).
    Uniform,
    /// Inverse class-frequency weights, age-blind.
    ClassOnly,
    /// Joint (expression, age-group) inverse-frequency weights.
    JointAge,
}

/// Full training recipe. `weighting: None` picks the variant's default:
/// uniform for the baseline, joint weights for the mitigation variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub variant: VariantKind,
    /// Backbone stage widths.
    pub widths: Vec<usize>,
    /// Fused feature dimension for the multi-modal variant (`None` = D/4).
    pub fuse_dim: Option<usize>,
    /// Age-regression mix-in coefficient (multi-task variant only).
    pub lambda: f64,
    pub weighting: Option<WeightStrategy>,
    pub max_epochs: usize,
    /// Stop after this many epochs without a qualifying improvement.
    pub patience: usize,
    /// Minimum absolute validation-accuracy gain that counts as improvement.
    pub min_delta: f64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub folds: usize,
    pub seed: u64,
    /// Training-time augmentation; `None` disables it.
    pub augment: Option<AugmentPolicy>,
    pub age_normalizer: AgeNormalizer,
    /// Dead-start escape hatch: if, this many epochs into an attempt, the
    /// attempt's best validation accuracy is still within 0.08 of chance,
    /// the fold re-initializes and tries again (`None` disables this).
    /// Checked only at the window boundary, so pick a patience of at least
    /// the window or early stopping can end a dead attempt first.
    #[serde(default)]
    pub restart_window: Option<usize>,
    /// How many re-initializations a fold may spend escaping dead starts.
    /// The final attempt always runs to completion.
    #[serde(default)]
    pub max_restarts: usize,
}

impl TrainConfig {
    pub fn new(variant: VariantKind) -> Self {
        TrainConfig {
            variant,
            widths: BackboneConfig::default().widths,
            fuse_dim: None,
            lambda: 1.0,
            weighting: None,
            max_epochs: 20,
            patience: 5,
            min_delta: 0.01,
            learning_rate: 1e-4,
            batch_size: 64,
            folds: 5,
            seed: 0,
            augment: Some(AugmentPolicy::default()),
            age_normalizer: AgeNormalizer::default(),
            restart_window: None,
            max_restarts: 0,
        }
    }

    pub fn strategy(&self) -> WeightStrategy {
        self.weighting.unwrap_or(match self.variant {
            VariantKind::Baseline => WeightStrategy::Uniform,
            _ => WeightStrategy::JointAge,
        })
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            kind: self.variant,
            backbone: BackboneConfig {
                widths: self.widths.clone(),
                init_seed: self.seed,
            },
            fuse_dim: self.fuse_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 {
            return Err(Error::BadTrainConfig("max_epochs must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::BadTrainConfig("patience must be at least 1".into()));
        }
        if !(self.min_delta >= 0.0) {
            return Err(Error::BadTrainConfig(format!("min_delta {} must be >= 0", self.min_delta)));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::BadTrainConfig(format!(
                "learning_rate {} must be positive",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::BadTrainConfig("batch_size must be at least 1".into()));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::NegativeLambda(self.lambda));
        }
        if self.restart_window == Some(0) {
            return Err(Error::BadTrainConfig("restart_window must be at least 1".into()));
        }
        Ok(())
    }
}

/// True when no epoch in the last `patience` epochs improved the running
/// best validation accuracy by at least `min_delta`. The running best only
/// advances on qualifying improvements, so a slow upward creep below the
/// threshold still stops.
pub fn should_stop(history: &[f64], patience: usize, min_delta: f64) -> bool {
    if history.is_empty() {
        return false;
    }
    let mut best = history[0];
    let mut last_improvement = 0usize;
    for (i, &v) in history.iter().enumerate().skip(1) {
        if v >= best + min_delta {
            best = v;
            last_improvement = i;
        }
    }
    history.len() - 1 - last_improvement >= patience
}

/// Adam with bias correction on a flat parameter vector.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Adam {
    pub fn new(n_params: usize, lr: f64) -> Adam {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            m: vec![0.0; n_params],
            v: vec![0.0; n_params],
        }
    }

    pub fn step(&mut self, params: &mut [f64], grads: &[f64]) {
        assert_eq!(params.len(), grads.len());
        assert_eq!(params.len(), self.m.len());
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / bc1;
            let v_hat = self.v[i] / bc2;
            params[i] -= self.lr * m_hat / (v_hat.sqrt() + self.eps);
        }
    }
}

/// A manifest with every record's image preprocessed into a model-ready
/// tensor, index-aligned with the manifest's records.
#[derive(Debug, Clone)]
pub struct PreparedDataset {
    manifest: DatasetManifest,
    faces: Vec<FaceImage>,
}

impl PreparedDataset {
    /// Run the preprocessing pipeline over every record, optionally through
    /// a tensor cache.
    pub fn prepare(
        manifest: &DatasetManifest,
        store: &dyn ImageStore,
        adapters: &DetectorAdapters,
        config: &PreprocessConfig,
        cache: Option<&TensorCache>,
    ) -> Result<Self> {
        let mut faces = Vec::with_capacity(manifest.len());
        for record in manifest.records() {
            let compute = || {
                let image = store.load_image(&record.image_ref)?;
                preprocess(&image, adapters, config)
            };
            let face = match cache {
                Some(c) => c.load_or_compute(&record.sample_id, compute)?,
                None => compute()?,
            };
            faces.push(face);
        }
        Ok(PreparedDataset {
            manifest: manifest.clone(),
            faces,
        })
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn face(&self, index: usize) -> &FaceImage {
        &self.faces[index]
    }

    pub fn len(&self) -> usize {
        self.faces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.faces.is_empty()
    }

    /// Replace the manifest with a fold-assigned copy (record order, and so
    /// tensor alignment, is preserved).
    pub fn with_folds(self, k: usize, seed: u64) -> Result<Self> {
        let manifest = assign_folds(&self.manifest, k, seed)?;
        Ok(PreparedDataset {
            manifest,
            faces: self.faces,
        })
    }
}

/// One epoch's scalar summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "epoch")]
pub enum StopReason {
    EarlyStopped(usize),
    MaxEpochs,
}

/// Everything one fold produced.
#[derive(Debug, Clone)]
pub struct FoldRun {
    pub fold: u32,
    /// Epoch logs across all attempts; `epoch` counts globally, so an
    /// abandoned attempt's epochs stay visible in the trace.
    pub epochs: Vec<EpochLog>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    /// How many dead-start re-initializations this fold used.
    pub restarts: usize,
    pub val_ids: Vec<String>,
    pub checkpoint: Checkpoint,
    pub checkpoint_path: Option<PathBuf>,
    pub wall_seconds: f64,
}

/// A full cross-validation run.
#[derive(Debug, Clone)]
pub struct CvRun {
    pub config: TrainConfig,
    pub folds: Vec<FoldRun>,
}

fn weight_table_for(strategy: WeightStrategy, manifest: &DatasetManifest) -> Result<WeightTable> {
    match strategy {
        WeightStrategy::Uniform => Ok(WeightTable::uniform()),
        WeightStrategy::ClassOnly => compute_class_weights(manifest),
        WeightStrategy::JointAge => compute_joint_weights(manifest),
    }
}

/// Loss spec for one fold, computed on that fold's training split only.
fn loss_spec_for_fold(
    cfg: &TrainConfig,
    data: &PreparedDataset,
    train_idx: &[usize],
) -> Result<(LossSpec, Vec<f64>)> {
    let records = data.manifest().records();
    let sub_records: Vec<SampleRecord> = train_idx.iter().map(|&i| records[i].clone()).collect();
    let sub_manifest = DatasetManifest::new("fold-train-split", sub_records)?;
    let table = weight_table_for(cfg.strategy(), &sub_manifest)?;

    // Density weights over the training split's known ages, aligned with
    // train_idx; samples without an age get weight 0 (their age term is
    // skipped).
    let (density, per_sample_density) = if cfg.variant == VariantKind::MultiTask {
        let ages: Vec<f64> = train_idx.iter().filter_map(|&i| records[i].age_years).collect();
        if ages.is_empty() {
            return Err(Error::BadAgeList);
        }
        let bandwidth = silverman_bandwidth(&ages)?;
        let dw = compute_density_weights(&ages, bandwidth)?;
        let mut aligned = Vec::with_capacity(train_idx.len());
        let mut next = 0usize;
        for &i in train_idx {
            if records[i].age_years.is_some() {
                aligned.push(dw.weights()[next]);
                next += 1;
            } else {
                aligned.push(0.0);
            }
        }
        (Some(dw), aligned)
    } else {
        (None, vec![0.0; train_idx.len()])
    };

    let lambda = (cfg.variant == VariantKind::MultiTask).then_some(cfg.lambda);
    let spec = LossSpec::new(table, density, lambda, cfg.age_normalizer)?;
    Ok((spec, per_sample_density))
}

/// Stack a set of faces (optionally augmented) into a batch tensor.
fn batch_tensor(
    data: &PreparedDataset,
    indices: &[usize],
    aug: Option<(&AugmentPolicy, u64)>,
) -> Array4<f64> {
    let (h, w) = data.face(indices[0]).shape();
    let mut x = Array4::zeros((indices.len(), 1, h, w));
    for (row, &i) in indices.iter().enumerate() {
        let face = data.face(i);
        match aug {
            Some((policy, salt)) => {
                let seed = fnv1a64(data.manifest().records()[i].sample_id.as_bytes()) ^ salt;
                let augmented = augment(face, seed, policy);
                x.index_axis_mut(ndarray::Axis(0), row)
                    .index_axis_mut(ndarray::Axis(0), 0)
                    .assign(&augmented.pixels);
            }
            None => {
                x.index_axis_mut(ndarray::Axis(0), row)
                    .index_axis_mut(ndarray::Axis(0), 0)
                    .assign(&face.pixels);
            }
        }
    }
    x
}

/// Normalized age inputs for the multi-modal variant; errors on records
/// without an age, which that variant cannot consume.
fn age_inputs(data: &PreparedDataset, indices: &[usize], normalizer: &AgeNormalizer) -> Result<Array1<f64>> {
    let records = data.manifest().records();
    let mut ages = Array1::zeros(indices.len());
    for (row, &i) in indices.iter().enumerate() {
        let r = &records[i];
        let age = r.age_years.ok_or_else(|| Error::MissingRecordAge(r.sample_id.clone()))?;
        ages[row] = normalizer.normalize(age);
    }
    Ok(ages)
}

fn accuracy(model: &ModelVariant<ReferenceCnn>, cfg: &TrainConfig, data: &PreparedDataset, indices: &[usize]) -> Result<f64> {
    let records = data.manifest().records();
    let mut correct = 0usize;
    for chunk in indices.chunks(cfg.batch_size) {
        let x = batch_tensor(data, chunk, None);
        let ages = if cfg.variant == VariantKind::MultiModal {
            Some(age_inputs(data, chunk, &cfg.age_normalizer)?)
        } else {
            None
        };
        let (out, _) = model.forward(&x, ages.as_ref())?;
        for (row, &i) in chunk.iter().enumerate() {
            if crate::modelkit::predict_expression(&out.logits.row(row).to_owned()) == records[i].expression {
                correct += 1;
            }
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

struct FoldSetup<'a> {
    cfg: &'a TrainConfig,
    data: &'a PreparedDataset,
    fold: u32,
    train_idx: Vec<usize>,
    val_idx: Vec<usize>,
    spec: LossSpec,
    density_by_pos: Vec<f64>,
}

fn train_one_fold(setup: FoldSetup<'_>) -> Result<FoldRun> {
    let FoldSetup {
        cfg,
        data,
        fold,
        train_idx,
        val_idx,
        spec,
        density_by_pos,
    } = setup;
    let started = Instant::now();
    let records = data.manifest().records();
    // Give each fold its own initialization so a bad draw cannot sink every
    // fold of the run at once.
    let fold_seed = cfg.seed ^ ((fold as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15));

    // Record index → density weight, materialized once for O(1) lookups.
    let mut density_by_record = vec![0.0; records.len()];
    for (pos, &i) in train_idx.iter().enumerate() {
        density_by_record[i] = density_by_pos[pos];
    }

    // Best epoch tracked globally across restart attempts.
    let mut epochs: Vec<EpochLog> = Vec::new();
    let mut best_epoch = 0usize;
    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params: Vec<f64> = Vec::new();
    let mut stop_reason = StopReason::MaxEpochs;
    let mut restarts = 0usize;
    let mut global_epoch = 0usize;
    // An attempt counts as dead when its best validation accuracy is still
    // within this margin of random guessing.
    let dead_threshold = 1.0 / Expression::COUNT as f64 + 0.08;

    'attempts: for attempt in 0..=cfg.max_restarts {
        let mut model_config = cfg.model_config();
        model_config.backbone.init_seed = fold_seed ^ (attempt as u64).wrapping_mul(0xA076_1D64_78BD_642F);
        let mut model = ModelVariant::build(&model_config)?;
        let mut params = model.params();
        let mut adam = Adam::new(params.len(), cfg.learning_rate);
        let mut history: Vec<f64> = Vec::new();
        let mut attempt_best = f64::NEG_INFINITY;

        for epoch_in_attempt in 0..cfg.max_epochs {
            let epoch = global_epoch;
            let mut order = train_idx.clone();
            let mut epoch_rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ ((fold as u64) << 40) ^ ((epoch as u64) << 8) ^ 0x5851_F42D);
            order.shuffle(&mut epoch_rng);

            let mut loss_sum = 0.0;
            let mut weight_sum = 0.0;
            for chunk in order.chunks(cfg.batch_size) {
                let aug_salt = cfg.seed ^ ((fold as u64) << 40) ^ ((epoch as u64) << 8);
                let x = batch_tensor(data, chunk, cfg.augment.as_ref().map(|p| (p, aug_salt)));
                let ages = if cfg.variant == VariantKind::MultiModal {
                    Some(age_inputs(data, chunk, &cfg.age_normalizer)?)
                } else {
                    None
                };
                let (out, cache) = model.forward(&x, ages.as_ref())?;

                // Weighted-mean normalization: dividing by the summed sample
                // weights (not the batch size) keeps the gradient scale — and
                // so the effective learning rate — independent of the weight
                // table's overall magnitude. With uniform weights this is the
                // plain batch mean.
                let norm: f64 = chunk
                    .iter()
                    .map(|&i| {
                        let r = &records[i];
                        spec.expression_weights.weight(r.expression, r.age_group())
                    })
                    .sum();
                let mut dlogits = Array2::zeros((chunk.len(), Expression::COUNT));
                let mut dage: Option<Array1<f64>> = out.age_pred.as_ref().map(|_| Array1::zeros(chunk.len()));
                for (row, &i) in chunk.iter().enumerate() {
                    let r = &records[i];
                    let weight = spec.expression_weights.weight(r.expression, r.age_group());
                    let logits: ArrayView1<f64> = out.logits.row(row);
                    if let Some(age_pred) = &out.age_pred {
                        let (target, density) = match r.age_years {
                            Some(a) => (cfg.age_normalizer.normalize(a), density_by_record[i]),
                            None => (0.0, 0.0),
                        };
                        let (loss, dl, da) = multitask_loss_grad(
                            logits,
                            r.expression,
                            weight,
                            age_pred[row],
                            target,
                            density,
                            cfg.lambda,
                        )?;
                        loss_sum += loss;
                        weight_sum += weight;
                        dlogits.row_mut(row).assign(&(dl / norm));
                        dage.as_mut().unwrap()[row] = da / norm;
                    } else {
                        let (loss, dl) = weighted_cross_entropy_grad(logits, r.expression, weight)?;
                        loss_sum += loss;
                        weight_sum += weight;
                        dlogits.row_mut(row).assign(&(dl / norm));
                    }
                }

                let (grads, _) = model.backward(&cache, &dlogits, dage.as_ref(), false);
                adam.step(&mut params, &grads);
                model.set_params(&params)?;
            }

            let val_accuracy = accuracy(&model, cfg, data, &val_idx)?;
            history.push(val_accuracy);
            attempt_best = attempt_best.max(val_accuracy);
            // Per-unit-weight loss, so the reported scale matches the
            // unweighted baseline's per-sample mean.
            let train_loss = loss_sum / weight_sum;
            epochs.push(EpochLog {
                epoch,
                train_loss,
                val_accuracy,
            });
            global_epoch += 1;
            if val_accuracy > best_acc {
                best_acc = val_accuracy;
                best_epoch = epoch;
                best_params = params.clone();
            }
            log::info!("fold {fold} epoch {epoch}: train loss {train_loss:.4}, val accuracy {val_accuracy:.4}");
            if attempt < cfg.max_restarts
                && cfg.restart_window == Some(epoch_in_attempt + 1)
                && attempt_best <= dead_threshold
            {
                restarts += 1;
                log::info!(
                    "fold {fold}: attempt {attempt} stuck at chance ({attempt_best:.4} after {} epochs), re-initializing",
                    epoch_in_attempt + 1
                );
                continue 'attempts;
            }
            if should_stop(&history, cfg.patience, cfg.min_delta) {
                stop_reason = StopReason::EarlyStopped(epoch);
                break 'attempts;
            }
        }
        break;
    }

    // The attempts differ only in their weight draws, so any of them can
    // host the winning parameters.
    let mut model = ModelVariant::build(&cfg.model_config())?;
    model.set_params(&best_params)?;
    let checkpoint = Checkpoint::from_variant(
        &model,
        Some(spec),
        CheckpointMeta {
            fold,
            seed: cfg.seed,
            best_epoch,
            best_val_accuracy: best_acc,
        },
    );

    Ok(FoldRun {
        fold,
        epochs,
        stop_reason,
        best_epoch,
        best_val_accuracy: best_acc,
        restarts,
        val_ids: val_idx.iter().map(|&i| records[i].sample_id.clone()).collect(),
        checkpoint,
        checkpoint_path: None,
        wall_seconds: started.elapsed().as_secs_f64(),
    })
}

/// Train `cfg.folds`-fold cross-validation over the dataset's training pool.
///
/// Records already carrying fold labels keep them; otherwise folds are
/// assigned stratified by (expression, age group). Loss weights and density
/// weights are recomputed per fold from that fold's training split alone.
/// When `out_dir` is given, each fold's best checkpoint is saved as
/// `fold{F}.ckpt.json` inside it.
pub fn train_cv(data: &PreparedDataset, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<CvRun> {
    cfg.validate()?;
    let data_owned;
    let data = if data
        .manifest()
        .records()
        .iter()
        .any(|r| r.split == Split::Train && r.fold.is_none())
    {
        data_owned = data.clone().with_folds(cfg.folds, cfg.seed)?;
        &data_owned
    } else {
        data
    };

    let records = data.manifest().records();
    let pool = data.manifest().train_pool();
    let mut folds = Vec::with_capacity(cfg.folds);
    for fold in 0..cfg.folds as u32 {
        let val_idx: Vec<usize> = pool.iter().copied().filter(|&i| records[i].fold == Some(fold)).collect();
        let train_idx: Vec<usize> = pool.iter().copied().filter(|&i| records[i].fold != Some(fold)).collect();
        if val_idx.is_empty() || train_idx.is_empty() {
            return Err(Error::EmptyFold(fold as usize));
        }

        // Leakage guard: the validation ids must never appear in training.
        let train_ids: HashSet<&str> = train_idx.iter().map(|&i| records[i].sample_id.as_str()).collect();
        for &i in &val_idx {
            if train_ids.contains(records[i].sample_id.as_str()) {
                return Err(Error::BadTrainConfig(format!(
                    "sample {} appears in both the fold-{fold} training and validation splits",
                    records[i].sample_id
                )));
            }
        }

        let (spec, density_by_pos) = loss_spec_for_fold(cfg, data, &train_idx)?;
        let mut run = train_one_fold(FoldSetup {
            cfg,
            data,
            fold,
            train_idx,
            val_idx,
            spec,
            density_by_pos,
        })?;
        if let Some(dir) = out_dir {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
            let path = dir.join(format!("fold{fold}.ckpt.json"));
            save_checkpoint(&path, &run.checkpoint)?;
            run.checkpoint_path = Some(path);
        }
        log::info!(
            "fold {fold}: best epoch {} with val accuracy {:.4} ({:?})",
            run.best_epoch,
            run.best_val_accuracy,
            run.stop_reason
        );
        folds.push(run);
    }

    Ok(CvRun {
        config: cfg.clone(),
        folds,
    })
}

/// Run a model over dataset records and return typed predictions for the
/// metrics pipeline. Every record needs an age (to place it in its group).
pub fn predict_dataset(
    model: &ModelVariant<ReferenceCnn>,
    normalizer: &AgeNormalizer,
    data: &PreparedDataset,
    indices: Option<&[usize]>,
) -> Result<Vec<Prediction>> {
    let records = data.manifest().records();
    let all: Vec<usize> = match indices {
        Some(idx) => idx.to_vec(),
        None => (0..data.len()).collect(),
    };
    if all.is_empty() {
        return Err(Error::NoPredictions);
    }
    let wants_age = model.kind() == VariantKind::MultiModal;
    let mut predictions = Vec::with_capacity(all.len());
    for chunk in all.chunks(64) {
        let x = batch_tensor(data, chunk, None);
        let ages = if wants_age {
            Some(age_inputs(data, chunk, normalizer)?)
        } else {
            None
        };
        let (out, _) = model.forward(&x, ages.as_ref())?;
        for (row, &i) in chunk.iter().enumerate() {
            let r = &records[i];
            let age = r.age_years.ok_or_else(|| Error::MissingRecordAge(r.sample_id.clone()))?;
            let group = crate::manifest::age_group_of(age)?;
            predictions.push(Prediction {
                truth: r.expression,
                predicted: crate::modelkit::predict_expression(&out.logits.row(row).to_owned()),
                group,
            });
        }
    }
    Ok(predictions)
}
