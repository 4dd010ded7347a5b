//! Experiment runner: configuration documents, per-seed runs, result
//! bundles, sweeps and calibration on top of `tes-core`.

pub mod config;
pub mod dataset;
pub mod error;
pub mod run;

pub use config::{ClassifierSpec, DatasetSpec, ExperimentConfig, InferConfig, Scenario, SchedulerSpec};
pub use error::{BenchError, Result};
pub use run::{
    apply_axis, calibrate, run_experiment, run_seed, run_sweep, summarize, write_bundle, Axis, Bundle, InferAssets,
    SeedResult, Stat, Summary, Sweep,
};
