//! Experiment harness: configuration, seed fan-out, sweep execution, metric
//! aggregation, and plot-ready output files for the skygrid simulator.

pub mod aggregate;
pub mod config;
pub mod output;
pub mod runner;

pub use aggregate::{aggregate, AggregateRecord};
pub use config::{Algorithm, ConfigError, ExperimentConfig};
pub use runner::{run_experiment, ExperimentOutcome, RunFailure, RunSummary};
