//! IO, configuration, and batch evaluation around the `ppc-core`
//! registration engine.
//!
//! - [`formats`]: volume / image / pose / correspondence / record files.
//! - [`config`]: flat key=value experiment configuration.
//! - [`external`]: the file-based correspondence estimator (the plug-in
//!   boundary for learned estimators).
//! - [`bench`]: the deterministic parallel benchmark runner.

pub mod bench;
pub mod config;
pub mod external;
pub mod formats;

pub use bench::{run_benchmark, Aggregates, BenchmarkOptions, EstimatorSpec, EvalReport, ViewSpec};
pub use config::ExperimentConfig;
pub use external::FileCorrespondenceEstimator;
