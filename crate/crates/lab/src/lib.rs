//! Experiment harness around `qatlab-core`: JSON configs with overrides, a
//! checksummed checkpoint container, metrics CSVs, IDX/CSV loaders, per-task
//! pipelines and the `report` aggregation.

pub mod checkpoint;
pub mod config;
mod error;
pub mod loaders;
pub mod metrics;
pub mod pipeline;
pub mod report;
pub mod run;

pub use error::{LabError, LabResult};
pub use qatlab_core as core;
