//! Experiment runner for the `nodule-core` library: configuration files,
//! crop archives, checkpoints, ablation grids and text artifacts.

pub mod ablation;
pub mod archive;
pub mod checkpoint;
pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use commands::run;
pub use error::{CliError, CliResult};
