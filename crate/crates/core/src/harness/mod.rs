//! Experiment runner: corpus loading, paired baseline/folding training, and the CSV and
//! JSON outputs.

pub mod config;
pub mod corpus;
pub mod demo;
pub mod experiment;
pub mod output;

use std::path::PathBuf;

pub use config::{Ablation, MetricsConfig, RunConfig, TrainingConfig, SCHEMA_VERSION};
pub use corpus::{
    load_corpus, synthetic_text, write_synthetic_corpus, Dataset, SYNTHETIC_CATEGORIES,
};
pub use demo::{fold_demo, DemoConfig};
pub use experiment::{evaluate_model, run_comparison, train_model, ComparisonResult, TrainedModel};
pub use output::{canonical_json, emit_tables, export_projection, TableRow};

use crate::error::Result;

/// Runs the comparison and writes every output file into `run.output`.
pub fn run_experiment(run: &RunConfig) -> Result<(ComparisonResult, Vec<PathBuf>)> {
    let result = run_comparison(run)?;
    let files = emit_tables(&result, &run.output)?;
    Ok((result, files))
}
