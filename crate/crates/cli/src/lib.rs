//! Experiment driver for the in-context time-series lab: dataset generation,
//! construction verification, lookback sweeps, bound reports, and desk-scale
//! pretraining with evaluation.

pub mod app;
pub mod bounds;
pub mod error;
pub mod io;
pub mod pretrain;
pub mod sweep;
pub mod verify;

pub use error::{CliError, CliResult};
