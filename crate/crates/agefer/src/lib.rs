//! Age-bias-aware facial expression recognition.
//!
//! This crate trains small expression classifiers under several bias
//! mitigation strategies (loss re-weighting by joint class/age-group
//! frequency, an auxiliary age-regression task, and age-conditioned
//! classification), evaluates them per age group, and explains their
//! decisions with aggregated saliency heatmaps in a face-aligned common
//! space.
//!
//! Modules:
//! - [`manifest`]: dataset records, age binning, ingestion, fold assignment
//! - [`weighting`]: class/joint frequency weights and age-density weights
//! - [`preprocess`]: face alignment pipeline, augmentation, tensor cache
//! - [`modelkit`]: backbones, model variants, losses, checkpoints
//! - [`trainer`]: cross-validated training with early stopping
//! - [`metrics`]: per-group F1, confusion matrices, fold aggregation
//! - [`xai`]: saliency maps warped to a common space and aggregated
//! - [`synth`]: synthetic bias-controlled face dataset generator
//! - [`render`]: PNG/SVG/HTML rendering for reports

pub mod error;
pub mod manifest;
pub mod metrics;
pub mod modelkit;
pub mod preprocess;
pub mod render;
pub mod synth;
pub mod trainer;
pub mod weighting;
pub mod xai;

pub use error::{Error, Result};

// Re-export the array library that appears throughout the public API so
// downstream crates use the exact same version.
pub use ndarray;
