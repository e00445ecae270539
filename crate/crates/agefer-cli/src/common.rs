//! Shared plumbing: error-to-exit-code mapping, run-directory layout, the
//! serialized run configuration, and flag parsing helpers.

use std::collections::BTreeSet;
use std::fmt;
use std::path::{Path, PathBuf};

use agefer::manifest::{AgeGroup, DatasetManifest, Ingested, ManifestSchema};
use agefer::modelkit::Checkpoint;
use agefer::preprocess::{PreprocessConfig, TensorCache};
use agefer::trainer::TrainConfig;
use serde::{Deserialize, Serialize};

/// Environment variable naming the preprocessed-tensor cache directory.
pub const CACHE_ENV: &str = "AGEFER_CACHE_DIR";

pub const RUN_CONFIG_FILE: &str = "run-config.json";
pub const RUN_RECORDS_FILE: &str = "run-records.json";
pub const ARTIFACTS_FILE: &str = "artifacts.json";
pub const EVALUATION_JSON: &str = "evaluation.json";
pub const EVALUATION_TEXT: &str = "evaluation.txt";
pub const TEMPLATE_FILE: &str = "template.json";
pub const PANEL_FILE: &str = "heatmap-panel.png";
pub const HEATMAP_DIR: &str = "heatmaps";

/// CLI failure with a stable exit-code class:
/// 2 usage, 3 missing files/artifacts, 4 invalid data, 5 model/artifact
/// mismatch (clap itself exits 2 on unparsable command lines).
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    MissingArtifact(String),
    Lib(agefer::Error),
}

pub type Result<T> = std::result::Result<T, CliError>;

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(msg) => write!(f, "{msg}"),
            CliError::MissingArtifact(msg) => write!(f, "missing artifact: {msg}"),
            CliError::Lib(err) => {
                write!(f, "{err}")?;
                let mut source = std::error::Error::source(err);
                while let Some(cause) = source {
                    write!(f, ": {cause}")?;
                    source = cause.source();
                }
                Ok(())
            }
        }
    }
}

impl From<agefer::Error> for CliError {
    fn from(err: agefer::Error) -> Self {
        CliError::Lib(err)
    }
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        use agefer::Error as E;
        match self {
            CliError::Usage(_) => 2,
            CliError::MissingArtifact(_) => 3,
            CliError::Lib(err) => match err {
                E::Io { .. } | E::MissingImage(_) => 3,
                E::Json(_) | E::CheckpointMismatch { .. } | E::BadModelConfig(_) | E::NonFiniteLogits => 5,
                _ => 4,
            },
        }
    }
}

/// Everything needed to reproduce a training run; written into the run
/// directory as `run-config.json` before training starts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    /// Training manifest path, as given on the command line.
    pub manifest: String,
    /// Directory image refs are resolved against.
    pub images_dir: String,
    pub preprocess: PreprocessConfig,
    pub train: TrainConfig,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    if !path.exists() {
        return Err(CliError::MissingArtifact(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&text).map_err(|e| CliError::Lib(agefer::Error::Json(e)))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(agefer::Error::Json)?;
    text.push('\n');
    std::fs::write(path, text).map_err(|e| io_err(path, e))
}

pub fn io_err(path: &Path, source: std::io::Error) -> CliError {
    CliError::Lib(agefer::Error::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Merge newly written files (paths relative to the run directory) into the
/// sorted `artifacts.json` index.
pub fn record_artifacts(run_dir: &Path, files: &[String]) -> Result<()> {
    let index_path = run_dir.join(ARTIFACTS_FILE);
    let mut index: BTreeSet<String> = if index_path.exists() {
        read_json(&index_path)?
    } else {
        BTreeSet::new()
    };
    index.extend(files.iter().cloned());
    write_json(&index_path, &index)
}

/// Tensor cache from `AGEFER_CACHE_DIR`, if set and non-empty.
pub fn cache_from_env() -> Result<Option<TensorCache>> {
    match std::env::var_os(CACHE_ENV) {
        Some(dir) if !dir.is_empty() => Ok(Some(TensorCache::new(PathBuf::from(dir))?)),
        _ => Ok(None),
    }
}

/// Parse a repeatable `group=path` test-manifest flag value.
pub fn parse_group_manifest(value: &str) -> Result<(AgeGroup, PathBuf)> {
    let (group, path) = value.split_once('=').ok_or_else(|| {
        CliError::Usage(format!(
            "--test-manifest expects group=path (children|adults|elderly), got {value:?}"
        ))
    })?;
    let group = parse_age_group(group)?;
    if path.is_empty() {
        return Err(CliError::Usage(format!("--test-manifest {value:?} has an empty path")));
    }
    Ok((group, PathBuf::from(path)))
}

pub fn parse_age_group(name: &str) -> Result<AgeGroup> {
    AgeGroup::ALL
        .iter()
        .copied()
        .find(|g| g.name() == name)
        .ok_or_else(|| {
            CliError::Usage(format!(
                "unknown age group {name:?}; expected one of children, adults, elderly"
            ))
        })
}

/// Load and validate a manifest file, logging drop tallies.
pub fn load_manifest(path: &Path) -> Result<DatasetManifest> {
    let Ingested { manifest, dropped } = agefer::manifest::ingest_manifest(path, &ManifestSchema::default())?;
    for (reason, count) in &dropped {
        log::warn!("{}: dropped {count} record(s): {reason:?}", path.display());
    }
    Ok(manifest)
}

/// Load the fold checkpoints of a run, in fold order.
pub fn load_fold_checkpoints(run_dir: &Path, folds: usize) -> Result<Vec<Checkpoint>> {
    let mut checkpoints = Vec::with_capacity(folds);
    for fold in 0..folds {
        let path = run_dir.join(format!("fold{fold}.ckpt.json"));
        if !path.exists() {
            return Err(CliError::MissingArtifact(format!(
                "{} (expected {folds} fold checkpoints)",
                path.display()
            )));
        }
        checkpoints.push(agefer::modelkit::load_checkpoint(&path)?);
    }
    Ok(checkpoints)
}

pub fn load_run_config(run_dir: &Path) -> Result<RunConfig> {
    read_json(&run_dir.join(RUN_CONFIG_FILE))
}
