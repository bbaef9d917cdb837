//! Config-driven experiments: grid runs with CSV/JSON output and the
//! verification suites behind `bszo-bench verify`.

pub mod config;
pub mod run;
pub mod verify;

pub use config::{Cell, ExperimentConfig, ObjectiveName, ObjectiveSpec, OptimizerGrid};
pub use run::{
    best_per_variant, grid_summary, run_cell, run_experiment, thread_pool, write_csv, GridEntry,
    RunRecord, RunSummary, StepRow, THREADS_ENV,
};
pub use verify::{Check, VerifyReport};
