//! Files, configuration and command-line runs for the mtnlu trainer.
//!
//! The numeric core lives in `mtnlu-core`; this crate reads task and plan
//! documents, TSV datasets and vocabularies, writes checkpoints, soft-target
//! files and logs, and drives whole runs for the `mtnlu` binary.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod logs;
pub mod run;
pub mod soft_targets;
pub mod synthetic;

pub use error::{CliError, Result};
