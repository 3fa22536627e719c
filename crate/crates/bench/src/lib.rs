//! Config-driven benchmark harness for the plugin learner: dataset loading,
//! the seeded run matrix, checkpoints and report files.

pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod ledger;
pub mod report;
pub mod runner;

pub use config::{parse_config, parse_with_overrides, ExperimentConfig};
pub use error::BenchError;
pub use runner::{run_experiment, run_seed, SeedRun, StageTrace};
