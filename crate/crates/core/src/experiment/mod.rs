//! Experiment runners, synthetic data, random-search tuning and CSV reports.

mod config;
mod hpo;
mod report;
mod runner;
mod synth;

pub use config::{ExperimentConfig, ExperimentKind};
pub use hpo::{FttRanges, HpoModel, HpoSpec, MlpRanges, Range, TrialParams};
pub use report::{
    emit_report, parse_sweep_label, read_results, summarize, sweep_points, write_results, write_trials, CsvResult,
    ResultRow, SummaryRow, SweepPoint, TrialRecord, RESULTS_FILE, SUMMARY_FILE, SWEEP_FILE, TRIALS_FILE,
};
pub use runner::{
    join_checked, run_experiment, run_experiment_threads, run_on_data, run_on_data_threads, DuoVariant, ExperimentOutput,
    SeedData,
};
pub use synth::{class_sizes, make_synthetic, SynthConfig, SynthKind};
