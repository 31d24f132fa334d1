//! Library side of the `hps` command: configuration, experiment runners and output.

// `!(x > 0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod experiments;
pub mod output;

pub use config::{ConfigError, ExperimentConfig, ExperimentKind, LoadedConfig};
pub use experiments::{run_experiment, Outcome, Row, RunError};
