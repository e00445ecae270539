//! `agefer`: train, audit, and explain facial-expression models with
//! explicit age-group accounting.
//!
//! A run directory accumulates everything one experiment produced — the
//! exact config, per-fold checkpoints, evaluation reports, and heatmaps —
//! plus an `artifacts.json` index, so any report can be regenerated
//! byte-for-byte from the directory alone.

mod common;
mod cmd_evaluate;
mod cmd_explain;
mod cmd_ingest;
mod cmd_report;
mod cmd_synth;
mod cmd_train;

use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "agefer",
    version,
    about = "Age-bias-aware facial expression recognition: synthesize data, train, evaluate, explain, report"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic face dataset with a controllable age bias.
    Synth(cmd_synth::SynthArgs),
    /// Validate a dataset manifest and summarize its composition.
    Ingest(cmd_ingest::IngestArgs),
    /// Train one model variant with k-fold cross-validation.
    Train(cmd_train::TrainArgs),
    /// Evaluate a run's fold checkpoints on per-age-group test manifests.
    Evaluate(cmd_evaluate::EvaluateArgs),
    /// Compute aggregated saliency heatmaps for a run.
    Explain(cmd_explain::ExplainArgs),
    /// Merge one or more runs into a single comparative HTML report.
    Report(cmd_report::ReportArgs),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(args) => cmd_synth::run(args),
        Command::Ingest(args) => cmd_ingest::run(args),
        Command::Train(args) => cmd_train::run(args),
        Command::Evaluate(args) => cmd_evaluate::run(args),
        Command::Explain(args) => cmd_explain::run(args),
        Command::Report(args) => cmd_report::run(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(err.exit_code());
    }
}
