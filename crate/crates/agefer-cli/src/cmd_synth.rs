//! `agefer synth`: generate the bundled synthetic-bias dataset on disk.

use std::path::PathBuf;

use agefer::manifest::write_manifest;
use agefer::synth::{generate, SynthSpec};
use clap::Args;

use crate::common::{io_err, record_artifacts, write_json, CliError, Result};

#[derive(Args)]
pub struct SynthArgs {
    /// Output dataset directory (created if absent).
    #[arg(long)]
    out: PathBuf,
    /// Dataset shape: "biased" under-represents and confounds the elderly
    /// group; "balanced" gives every cell the same count and no confound.
    #[arg(long, default_value = "biased")]
    mode: String,
    /// Training images per (expression, age group) cell.
    #[arg(long, default_value_t = 40)]
    per_cell: usize,
    /// Training images per elderly cell in biased mode.
    #[arg(long, default_value_t = 4)]
    elderly_per_cell: usize,
    /// Test images per cell in every group.
    #[arg(long, default_value_t = 12)]
    test_per_cell: usize,
    /// Confounder blend strength in [0, 1] for biased mode.
    #[arg(long, default_value_t = 0.6)]
    blend: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Image side length in pixels.
    #[arg(long, default_value_t = 224)]
    size: usize,
    /// Pixel noise standard deviation.
    #[arg(long, default_value_t = 0.02)]
    noise: f64,
}

pub fn run(args: SynthArgs) -> Result<()> {
    let base = match args.mode.as_str() {
        "biased" => SynthSpec::demo_bias(args.per_cell, args.elderly_per_cell, args.test_per_cell, args.blend, args.seed),
        "balanced" => SynthSpec::balanced(args.per_cell, args.test_per_cell, args.seed),
        other => {
            return Err(CliError::Usage(format!(
                "unknown --mode {other:?}; expected biased or balanced"
            )))
        }
    };
    let spec = SynthSpec {
        image_size: args.size,
        noise_std: args.noise,
        ..base
    };
    let out = generate(&spec)?;

    std::fs::create_dir_all(&args.out).map_err(|e| io_err(&args.out, e))?;
    out.images.write_all_png(&args.out)?;
    let mut written: Vec<String> = out.images.refs().map(str::to_string).collect();

    let train_path = args.out.join("train.csv");
    write_manifest(&out.train_manifest, &train_path)?;
    written.push("train.csv".into());
    for (group, manifest) in &out.test_manifests {
        let name = format!("test-{}.csv", group.name());
        write_manifest(manifest, &args.out.join(&name))?;
        written.push(name);
    }
    write_json(&args.out.join("synth-spec.json"), &spec)?;
    written.push("synth-spec.json".into());
    written.sort();
    record_artifacts(&args.out, &written)?;

    println!(
        "wrote {} train and {} test records ({} images) to {}",
        out.train_manifest.len(),
        out.test_manifests.values().map(|m| m.len()).sum::<usize>(),
        out.images.len(),
        args.out.display()
    );
    for (group, manifest) in &out.test_manifests {
        println!("  test {}: {} records", group.name(), manifest.len());
    }
    Ok(())
}
