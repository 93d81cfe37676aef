//! Configuration-driven runner for the kolmo-core experiments.

pub mod config;
pub mod error;
pub mod report;
pub mod run;

pub use config::{Config, Experiment};
pub use error::{CliError, Result};
pub use run::{run, Outcome, Selection};
