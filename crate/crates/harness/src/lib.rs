//! Command-line harness around `navfuse`: simulation, log ingestion, network
//! training, filter runs and aware/neglect comparisons. Every command writes a
//! manifest from which [`commands::replay`] reproduces its outputs.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod manifest;

pub use commands::{execute, replay};
pub use config::ExperimentConfig;
pub use error::{HarnessError, Result};
pub use manifest::{Manifest, Task};
