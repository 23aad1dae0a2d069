//! Experiment orchestration: fitting the inference pipeline on a synthetic
//! world, scoring galleries per query, and writing result tables.

mod config;
mod pipeline;
mod run;

pub use config::{ExperimentConfig, ModelConfig, Toggles};
pub use pipeline::{fit_alignment, Prepared};
pub use run::{
    compute_rows, compute_rows_for_world, config_hash, evaluate_point, exp_id, read_results,
    run_experiment, score_point, summarize, write_results, ResultRow, SummaryRow, BUILD_ID,
};
