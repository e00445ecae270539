//! `agefer ingest`: validate a manifest, optionally fill missing ages, and
//! summarize the dataset's (expression, age group) composition.

use std::path::PathBuf;

use agefer::manifest::{annotate_ages, write_manifest, ConstantAgeEstimator, Ingested, ManifestSchema};
use clap::Args;

use crate::common::Result;

#[derive(Args)]
pub struct IngestArgs {
    /// Manifest file to validate.
    #[arg(long)]
    manifest: PathBuf,
    /// Fill records without a usable age using a fixed estimate (years).
    #[arg(long)]
    annotate_constant: Option<f64>,
    /// Write the validated (and possibly annotated) manifest here.
    #[arg(long)]
    write: Option<PathBuf>,
}

pub fn run(args: IngestArgs) -> Result<()> {
    let Ingested { manifest, dropped } =
        agefer::manifest::ingest_manifest(&args.manifest, &ManifestSchema::default())?;
    let manifest = match args.annotate_constant {
        Some(age) => {
            let annotated = annotate_ages(&manifest, &ConstantAgeEstimator(age))?;
            println!("annotated {} record(s) with age {age}", annotated.annotated);
            if !annotated.failed.is_empty() {
                println!("  estimator failed on {} record(s)", annotated.failed.len());
            }
            annotated.manifest
        }
        None => manifest,
    };

    println!("{}: {} valid record(s)", args.manifest.display(), manifest.len());
    for (reason, count) in &dropped {
        println!("  dropped {count}: {reason:?}");
    }
    for (expression, count) in manifest.class_counts() {
        println!("  {:<10} {count}", expression.name());
    }
    for ((expression, group), count) in manifest.group_counts() {
        println!("  {:<10} {:<9} {count}", expression.name(), group.name());
    }

    if let Some(path) = &args.write {
        write_manifest(&manifest, path)?;
        println!("wrote {}", path.display());
    }
    Ok(())
}
