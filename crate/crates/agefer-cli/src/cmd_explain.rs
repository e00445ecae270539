//! `agefer explain`: aggregated saliency heatmaps per (expression, age
//! group) over a run's fold checkpoints, plus the panel image.

use std::collections::BTreeMap;
use std::path::PathBuf;

use agefer::manifest::{AgeGroup, Expression};
use agefer::modelkit::VariantKind;
use agefer::preprocess::{DetectorAdapters, DirImageStore};
use agefer::render::{heat_image, heatmap_panel, save_png};
use agefer::trainer::PreparedDataset;
use agefer::xai::{
    aggregate_heatmaps, merge_fold_heatmaps, saliency, to_common_space, AggregatedHeatmap, LandmarkTemplate,
    WarpedMap,
};
use clap::Args;
use agefer::ndarray::Array2;

use crate::common::{
    cache_from_env, io_err, load_fold_checkpoints, load_manifest, load_run_config, parse_group_manifest,
    record_artifacts, write_json, CliError, Result, HEATMAP_DIR, PANEL_FILE, TEMPLATE_FILE,
};

#[derive(Args)]
pub struct ExplainArgs {
    /// Run directory produced by `agefer train`.
    #[arg(long)]
    run: PathBuf,
    /// Directory test image refs resolve against.
    #[arg(long)]
    images: PathBuf,
    /// Repeatable group=path test manifest (children|adults|elderly).
    #[arg(long = "test-manifest", required = true)]
    test_manifests: Vec<String>,
    /// Cap on explained samples per (expression, age group) cell per fold.
    #[arg(long, default_value_t = 16)]
    limit_per_cell: usize,
}

pub fn run(args: ExplainArgs) -> Result<()> {
    let config = load_run_config(&args.run)?;
    let checkpoints = load_fold_checkpoints(&args.run, config.train.folds)?;
    let store = DirImageStore::new(&args.images);
    let cache = cache_from_env()?;
    let wants_age = config.train.variant == VariantKind::MultiModal;

    // Per-group datasets, with samples capped per cell in manifest order.
    let mut datasets: Vec<(AgeGroup, PreparedDataset, Vec<usize>)> = Vec::new();
    for value in &args.test_manifests {
        let (group, path) = parse_group_manifest(value)?;
        let manifest = load_manifest(&path)?;
        let data = PreparedDataset::prepare(
            &manifest,
            &store,
            &DetectorAdapters::stub(),
            &config.preprocess,
            cache.as_ref(),
        )?;
        let mut per_cell: BTreeMap<Expression, usize> = BTreeMap::new();
        let mut keep = Vec::new();
        for (i, record) in data.manifest().records().iter().enumerate() {
            let seen = per_cell.entry(record.expression).or_insert(0);
            if *seen < args.limit_per_cell {
                *seen += 1;
                keep.push(i);
            }
        }
        datasets.push((group, data, keep));
    }

    // Canonical frame: mean landmark configuration over every explained
    // face, persisted alongside the heatmaps.
    let mut landmark_sets: Vec<Vec<(f64, f64)>> = Vec::new();
    for (_, data, keep) in &datasets {
        for &i in keep {
            let landmarks = data.face(i).landmarks.clone().ok_or_else(|| {
                CliError::Lib(agefer::Error::DegenerateLandmarks(format!(
                    "sample {:?} has no landmarks",
                    data.manifest().records()[i].sample_id
                )))
            })?;
            landmark_sets.push(landmarks);
        }
    }
    let template = LandmarkTemplate::from_mean(
        landmark_sets.iter().map(Vec::as_slice),
        config.preprocess.output_size,
    )?;

    // fold -> cell -> warped maps.
    let mut per_fold: Vec<BTreeMap<(Expression, AgeGroup), Vec<WarpedMap>>> = Vec::new();
    for checkpoint in &checkpoints {
        let model = checkpoint.instantiate()?;
        let mut cells: BTreeMap<(Expression, AgeGroup), Vec<WarpedMap>> = BTreeMap::new();
        for (group, data, keep) in &datasets {
            for &i in keep {
                let record = &data.manifest().records()[i];
                let age_norm = if wants_age {
                    let age = record
                        .age_years
                        .ok_or_else(|| agefer::Error::MissingRecordAge(record.sample_id.clone()))?;
                    Some(config.train.age_normalizer.normalize(age))
                } else {
                    None
                };
                let map = saliency(&model, data.face(i), age_norm, record.expression, &record.sample_id)?;
                let warped = to_common_space(&map, data.face(i).landmarks.as_ref().unwrap(), &template)?;
                cells.entry((record.expression, *group)).or_default().push(warped);
            }
        }
        per_fold.push(cells);
    }

    // Aggregate within folds, then across them.
    let mut merged: BTreeMap<(Expression, AgeGroup), AggregatedHeatmap> = BTreeMap::new();
    let cell_keys: std::collections::BTreeSet<(Expression, AgeGroup)> =
        per_fold.iter().flat_map(|cells| cells.keys().copied()).collect();
    for key in cell_keys {
        let mut fold_maps = Vec::new();
        for cells in &per_fold {
            if let Some(maps) = cells.get(&key) {
                fold_maps.push(aggregate_heatmaps(maps, key.0, key.1, &template.id)?);
            }
        }
        if !fold_maps.is_empty() {
            merged.insert(key, merge_fold_heatmaps(&fold_maps)?);
        }
    }
    if merged.is_empty() {
        return Err(CliError::Lib(agefer::Error::EmptyAggregation));
    }

    // Artifacts: numeric grids, per-cell tiles, one panel.
    let heatmap_dir = args.run.join(HEATMAP_DIR);
    std::fs::create_dir_all(&heatmap_dir).map_err(|e| io_err(&heatmap_dir, e))?;
    let mut written = vec![TEMPLATE_FILE.to_string(), PANEL_FILE.to_string()];
    write_json(&args.run.join(TEMPLATE_FILE), &template)?;
    let mut display: BTreeMap<(Expression, AgeGroup), Array2<f64>> = BTreeMap::new();
    for (&(expression, group), heatmap) in &merged {
        let stem = format!("{}-{}", expression.name(), group.name());
        write_json(&heatmap_dir.join(format!("{stem}.json")), heatmap)?;
        let grid = heatmap.display_grid();
        save_png(&heat_image(&grid), &heatmap_dir.join(format!("{stem}.png")))?;
        written.push(format!("{HEATMAP_DIR}/{stem}.json"));
        written.push(format!("{HEATMAP_DIR}/{stem}.png"));
        display.insert((expression, group), grid);
        println!(
            "{:<10} {:<9} {} sample-map(s)",
            expression.name(),
            group.name(),
            heatmap.n_samples
        );
    }
    save_png(&heatmap_panel(&display)?, &args.run.join(PANEL_FILE))?;
    record_artifacts(&args.run, &written)?;
    println!("wrote {} cell heatmap(s) and {}", merged.len(), args.run.join(PANEL_FILE).display());
    Ok(())
}
