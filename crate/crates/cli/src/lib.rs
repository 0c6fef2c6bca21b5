// SPDX-License-Identifier: Apache-2.0

//! Experiment harness for EVF layers: gradient audits, allocation traces,
//! staged training runs and telemetry tables.

pub mod commands;
pub mod config;
pub mod error;
pub mod fixture;
pub mod report;

pub use commands::{cmd_allocate_trace, cmd_grad_check, cmd_telemetry_report, cmd_train};
pub use config::{RunConfig, OUTPUT_ROOT_ENV};
pub use error::{CliError, CliResult};
