//! Monte-Carlo training experiments over simulated fading channels.

mod config;
mod experiment;
mod export;
mod training;

pub use config::{BudgetSpec, ExperimentConfig, OutputSpec, Seeds};
pub use experiment::{
    compare_policies, compute_schedule, monte_carlo, run_trial, run_trials, trial_channel, validate_bound,
    BoundCheck, BoundReport, Comparison, Curve, HorizonPoint, PolicyRun, PolicySummary, TrialResult,
};
pub use export::{
    comparison_table, read_trace_csv, write_comparison_csv, write_horizons_csv, write_plot_csv, write_trace_csv,
    TraceRecord,
};
pub use training::{run_training, Setup, TrainingTrace, TrialStreams, DIVERGENCE_FACTOR};
