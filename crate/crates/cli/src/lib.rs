//! Experiment harness around `boa-core`: JSON configs in, CSV out.
//!
//! The binary (`boa`) wires these modules to subcommands; the library
//! surface exists so integration and acceptance tests can drive the
//! same code paths in-process.

pub mod config;
pub mod csvout;
pub mod fitrate;
pub mod runner;

pub use config::{parse_config, ConfigError, ExperimentConfig, ResolvedExperiment};
pub use csvout::{format_real, write_summary, write_trace, SummaryRow, SUMMARY_HEADER};
pub use fitrate::{fit_rate, fit_rate_from_groups, FitError, RateFit};
pub use runner::{run_bernstein, run_cell, run_oracle, run_single, run_sweep, RunnerError};
