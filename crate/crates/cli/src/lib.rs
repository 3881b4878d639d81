//! Experiment driver: configuration parsing and the synth, features, train,
//! evaluate and backtest stages.

pub mod config;
pub mod error;
pub mod run;

pub use config::{parse_config, ExperimentConfig};
pub use error::{CliError, Result};
pub use run::{Command, Experiment};
