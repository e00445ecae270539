//! `agefer evaluate`: per-age-group evaluation of a run's fold checkpoints
//! over one test manifest per group, merged into a single report.

use std::path::PathBuf;

use agefer::metrics::{aggregate_folds, confusion_by_group, GroupMetricsReport, Prediction};
use agefer::preprocess::{DetectorAdapters, DirImageStore};
use agefer::trainer::{predict_dataset, PreparedDataset};
use clap::Args;

use crate::common::{
    cache_from_env, io_err, load_fold_checkpoints, load_manifest, load_run_config, parse_group_manifest,
    record_artifacts, write_json, CliError, Result, EVALUATION_JSON, EVALUATION_TEXT,
};

#[derive(Args)]
pub struct EvaluateArgs {
    /// Run directory produced by `agefer train`.
    #[arg(long)]
    run: PathBuf,
    /// Directory test image refs resolve against.
    #[arg(long)]
    images: PathBuf,
    /// Repeatable group=path test manifest (children|adults|elderly).
    #[arg(long = "test-manifest", required = true)]
    test_manifests: Vec<String>,
}

pub fn run(args: EvaluateArgs) -> Result<()> {
    let report = evaluate_run(&args)?;
    let json_path = args.run.join(EVALUATION_JSON);
    write_json(&json_path, &report)?;
    let text = report.to_text();
    let text_path = args.run.join(EVALUATION_TEXT);
    std::fs::write(&text_path, &text).map_err(|e| io_err(&text_path, e))?;
    record_artifacts(&args.run, &[EVALUATION_JSON.to_string(), EVALUATION_TEXT.to_string()])?;
    print!("{text}");
    println!("wrote {}", json_path.display());
    Ok(())
}

pub fn evaluate_run(args: &EvaluateArgs) -> Result<GroupMetricsReport> {
    let config = load_run_config(&args.run)?;
    let checkpoints = load_fold_checkpoints(&args.run, config.train.folds)?;
    let store = DirImageStore::new(&args.images);
    let cache = cache_from_env()?;

    let mut datasets = Vec::new();
    for value in &args.test_manifests {
        let (group, path) = parse_group_manifest(value)?;
        let manifest = load_manifest(&path)?;
        for record in manifest.records() {
            match record.age_group() {
                Some(g) if g == group => {}
                got => {
                    return Err(CliError::Usage(format!(
                        "{}: record {:?} has age group {:?} but the manifest was declared {}",
                        path.display(),
                        record.sample_id,
                        got.map(|g| g.name()),
                        group.name()
                    )))
                }
            }
        }
        let data = PreparedDataset::prepare(
            &manifest,
            &store,
            &DetectorAdapters::stub(),
            &config.preprocess,
            cache.as_ref(),
        )?;
        datasets.push(data);
    }

    let mut fold_reports = Vec::with_capacity(checkpoints.len());
    for checkpoint in &checkpoints {
        let model = checkpoint.instantiate()?;
        let mut predictions: Vec<Prediction> = Vec::new();
        for data in &datasets {
            predictions.extend(predict_dataset(&model, &config.train.age_normalizer, data, None)?);
        }
        fold_reports.push(confusion_by_group(&predictions)?);
    }
    Ok(aggregate_folds(&fold_reports)?)
}
