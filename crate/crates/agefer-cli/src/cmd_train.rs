//! `agefer train`: k-fold cross-validation training of one variant,
//! producing a self-contained run directory.

use std::path::PathBuf;

use agefer::modelkit::VariantKind;
use agefer::preprocess::{DetectorAdapters, DirImageStore, PreprocessConfig};
use agefer::trainer::{train_cv, EpochLog, PreparedDataset, StopReason, TrainConfig};
use clap::Args;
use serde::{Deserialize, Serialize};

use crate::common::{
    cache_from_env, io_err, load_manifest, record_artifacts, write_json, CliError, Result, RunConfig,
    RUN_CONFIG_FILE, RUN_RECORDS_FILE,
};

#[derive(Args)]
pub struct TrainArgs {
    /// Training manifest (CSV).
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Directory image refs resolve against.
    #[arg(long)]
    images: Option<PathBuf>,
    /// Run directory for checkpoints and records (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Base run configuration (JSON); explicit flags override its fields.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Model variant: baseline, age_weighted, multi_task, or multi_modal.
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    folds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    min_delta: Option<f64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Backbone stage widths, comma separated (e.g. 8,16,32,64).
    #[arg(long)]
    widths: Option<String>,
    /// Multi-task age-loss mix weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Fused feature dimension for the multi-modal variant.
    #[arg(long)]
    fuse_dim: Option<usize>,
    /// Preprocessed image side length.
    #[arg(long)]
    output_size: Option<usize>,
    /// Disable training-time augmentation.
    #[arg(long, default_value_t = false)]
    no_augment: bool,
}

/// Fold summary persisted as `run-records.json`.
#[derive(Debug, Serialize, Deserialize)]
pub struct RunRecord {
    pub fold: u32,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
    pub stop_reason: StopReason,
    pub epochs: Vec<EpochLog>,
    pub val_ids: Vec<String>,
    pub checkpoint: String,
    pub wall_seconds: f64,
}

pub fn parse_variant(name: &str) -> Result<VariantKind> {
    VariantKind::ALL
        .iter()
        .copied()
        .find(|v| v.name() == name)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "unknown variant {name:?}; expected one of baseline, age_weighted, multi_task, multi_modal"
            ))
        })
}

fn parse_widths(spec: &str) -> Result<Vec<usize>> {
    let widths: std::result::Result<Vec<usize>, _> = spec.split(',').map(|p| p.trim().parse::<usize>()).collect();
    match widths {
        Ok(w) if !w.is_empty() => Ok(w),
        _ => Err(CliError::Usage(format!(
            "--widths expects comma-separated positive integers, got {spec:?}"
        ))),
    }
}

/// Resolve the effective run configuration from an optional base file plus
/// flag overrides.
fn resolve_config(args: &TrainArgs) -> Result<RunConfig> {
    let mut config = match &args.config {
        Some(path) => crate::common::read_json::<RunConfig>(path)?,
        None => {
            let variant = parse_variant(args.variant.as_deref().unwrap_or("baseline"))?;
            RunConfig {
                manifest: String::new(),
                images_dir: String::new(),
                preprocess: PreprocessConfig::default(),
                train: TrainConfig::new(variant),
            }
        }
    };
    if args.config.is_some() {
        if let Some(variant) = &args.variant {
            config.train.variant = parse_variant(variant)?;
        }
    }
    if let Some(manifest) = &args.manifest {
        config.manifest = manifest.display().to_string();
    }
    if let Some(images) = &args.images {
        config.images_dir = images.display().to_string();
    }
    if let Some(seed) = args.seed {
        config.train.seed = seed;
    }
    if let Some(folds) = args.folds {
        config.train.folds = folds;
    }
    if let Some(epochs) = args.epochs {
        config.train.max_epochs = epochs;
    }
    if let Some(patience) = args.patience {
        config.train.patience = patience;
    }
    if let Some(min_delta) = args.min_delta {
        config.train.min_delta = min_delta;
    }
    if let Some(lr) = args.learning_rate {
        config.train.learning_rate = lr;
    }
    if let Some(batch) = args.batch_size {
        config.train.batch_size = batch;
    }
    if let Some(widths) = &args.widths {
        config.train.widths = parse_widths(widths)?;
    }
    if let Some(lambda) = args.lambda {
        config.train.lambda = lambda;
    }
    if let Some(fuse_dim) = args.fuse_dim {
        config.train.fuse_dim = Some(fuse_dim);
    }
    if let Some(size) = args.output_size {
        config.preprocess.output_size = size;
    }
    if args.no_augment {
        config.train.augment = None;
    }
    if config.manifest.is_empty() {
        return Err(CliError::Usage("--manifest is required (or provide it via --config)".into()));
    }
    if config.images_dir.is_empty() {
        return Err(CliError::Usage("--images is required (or provide it via --config)".into()));
    }
    config.train.validate()?;
    Ok(config)
}

pub fn run(args: TrainArgs) -> Result<()> {
    let config = resolve_config(&args)?;
    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;

    let manifest = load_manifest(std::path::Path::new(&config.manifest))?;
    let store = DirImageStore::new(&config.images_dir);
    let cache = cache_from_env()?;
    log::info!(
        "preparing {} record(s) at {}px{}",
        manifest.len(),
        config.preprocess.output_size,
        if cache.is_some() { " (cached)" } else { "" }
    );
    let data = PreparedDataset::prepare(
        &manifest,
        &store,
        &DetectorAdapters::stub(),
        &config.preprocess,
        cache.as_ref(),
    )?;

    write_json(&args.out.join(RUN_CONFIG_FILE), &config)?;
    let cv = train_cv(&data, &config.train, Some(&args.out))?;

    let mut written = vec![RUN_CONFIG_FILE.to_string(), RUN_RECORDS_FILE.to_string()];
    let mut records = Vec::with_capacity(cv.folds.len());
    for fold in &cv.folds {
        let checkpoint = format!("fold{}.ckpt.json", fold.fold);
        written.push(checkpoint.clone());
        println!(
            "fold {}: best val accuracy {:.4} at epoch {} ({:?}, {} epochs, {:.1}s)",
            fold.fold,
            fold.best_val_accuracy,
            fold.best_epoch,
            fold.stop_reason,
            fold.epochs.len(),
            fold.wall_seconds
        );
        records.push(RunRecord {
            fold: fold.fold,
            best_epoch: fold.best_epoch,
            best_val_accuracy: fold.best_val_accuracy,
            stop_reason: fold.stop_reason,
            epochs: fold.epochs.clone(),
            val_ids: fold.val_ids.clone(),
            checkpoint,
            wall_seconds: fold.wall_seconds,
        });
    }
    write_json(&args.out.join(RUN_RECORDS_FILE), &records)?;
    record_artifacts(&args.out, &written)?;
    println!(
        "trained {} on {} samples; run directory: {}",
        config.train.variant.name(),
        data.len(),
        args.out.display()
    );
    Ok(())
}
