//! Scratch harness for sizing the bias/mitigation demo experiment.
//! Usage: pilot <per_cell> <elderly> <test_per_cell> <epochs> <folds> <lr> <seed...>

use agefer::manifest::AgeGroup;
use agefer::metrics::{aggregate_folds, confusion_by_group, Prediction};
use agefer::modelkit::VariantKind;
use agefer::preprocess::{DetectorAdapters, PreprocessConfig};
use agefer::synth::{generate, SynthSpec};
use agefer::trainer::{predict_dataset, train_cv, PreparedDataset, TrainConfig};

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let per_cell: usize = args[0].parse().unwrap();
    let elderly: usize = args[1].parse().unwrap();
    let test_per_cell: usize = args[2].parse().unwrap();
    let epochs: usize = args[3].parse().unwrap();
    let folds: usize = args[4].parse().unwrap();
    let lr: f64 = args[5].parse().unwrap();
    let seeds: Vec<u64> = args[6..].iter().map(|s| s.parse().unwrap()).collect();

    let t0 = std::time::Instant::now();
    let env_f64 = |name: &str, default: f64| -> f64 {
        std::env::var(name).ok().and_then(|v| v.parse().ok()).unwrap_or(default)
    };
    let noise = env_f64("PILOT_NOISE", 0.02);
    let wrinkle = env_f64("PILOT_WRINKLE", 0.25);
    let size = env_f64("PILOT_SIZE", 64.0) as usize;
    for &seed in &seeds {
        let mut spec = SynthSpec::demo_bias(per_cell, elderly, test_per_cell, 0.6, seed);
        spec.image_size = size;
        spec.noise_std = noise;
        spec.wrinkle_amplitude = wrinkle;
        let out = generate(&spec).unwrap();
        let pp = PreprocessConfig {
            output_size: size,
            ..Default::default()
        };
        let adapters = DetectorAdapters::stub();
        let train_data = PreparedDataset::prepare(&out.train_manifest, &out.images, &adapters, &pp, None).unwrap();
        let test_data: Vec<PreparedDataset> = out
            .test_manifests
            .values()
            .map(|m| PreparedDataset::prepare(m, &out.images, &adapters, &pp, None).unwrap())
            .collect();
        let widths: Vec<usize> = std::env::var("PILOT_WIDTHS")
            .unwrap_or_else(|_| "16,32".into())
            .split(',')
            .map(|p| p.parse().unwrap())
            .collect();
        for variant in [VariantKind::Baseline, VariantKind::AgeWeighted] {
            let mut cfg = TrainConfig::new(variant);
            cfg.widths = widths.clone();
            cfg.learning_rate = lr;
            cfg.batch_size = 8;
            cfg.max_epochs = epochs;
            cfg.patience = epochs;
            cfg.min_delta = 0.002;
            cfg.folds = folds;
            cfg.seed = seed;
            cfg.augment = None;
            let run = train_cv(&train_data, &cfg, None).unwrap();
            let mut fold_reports = Vec::new();
            for fold in &run.folds {
                let model = fold.checkpoint.instantiate().unwrap();
                let mut preds: Vec<Prediction> = Vec::new();
                for data in &test_data {
                    preds.extend(predict_dataset(&model, &cfg.age_normalizer, data, None).unwrap());
                }
                fold_reports.push(confusion_by_group(&preds).unwrap());
            }
            let report = aggregate_folds(&fold_reports).unwrap();
            print!("seed {seed} {:>12}:", variant.name());
            for g in AgeGroup::ALL {
                print!(" {g}={:.4}", report.groups[&g].macro_f1);
            }
            let vals: Vec<String> = run.folds.iter().map(|f| format!("{:.3}@{}", f.best_val_accuracy, f.best_epoch)).collect();
            println!("  val[{}] t={:.0}s", vals.join(","), t0.elapsed().as_secs_f64());
            if std::env::var_os("PILOT_CURVE").is_some() {
                for fold in &run.folds {
                    let curve: Vec<String> = fold
                        .epochs
                        .iter()
                        .step_by(10)
                        .map(|e| format!("{}:{:.2}/{:.2}", e.epoch, e.train_loss, e.val_accuracy))
                        .collect();
                    println!("    fold {} curve: {}", fold.fold, curve.join(" "));
                }
            }
        }
    }
}
