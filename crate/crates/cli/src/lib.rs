//! Library side of the `recodiff` command-line tool.

pub mod commands;
pub mod config;

use std::fmt;

pub use config::{ExperimentConfig, Method};

/// Command failure, split by exit code.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration. Exit code 2.
    Config(String),
    /// Failure while running a valid request. Exit code 1.
    Runtime(anyhow::Error),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Runtime(_) => 1,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "configuration error: {msg}"),
            CliError::Runtime(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<recodiff_core::Error> for CliError {
    fn from(e: recodiff_core::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}
