//! Class-incremental learning with task-specific ConvLoRA plugins.
//!
//! A base convolutional feature extractor is trained per task with replay
//! and/or logit distillation. After each task the extractor is frozen and a
//! fresh set of low-rank convolutional adapters is trained for that task. At
//! inference every task's adapted representation is computed, concatenated,
//! re-weighted by a small sigmoid gate and classified by an aggregate head.
//!
//! Module map:
//! - [`nn`]: tensors-as-ndarray substrate (conv, batch-norm, linear heads, SGD).
//! - [`convlora`]: adapters, plugin sets and parameter accounting.
//! - [`gating`]: the weighting unit and its importance-aware loss.
//! - [`engine`]: task streams, herding replay, losses and the two-phase learner.
//! - [`metrics`]: accuracy, confusion matrices, ledgers and drift.
//! - [`serialize`]: little-endian array files for checkpoints.

pub mod convlora;
pub mod engine;
pub mod error;
pub mod gating;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod serialize;

pub use error::{Error, Result};
