//! Library side of the `arnet` command: configuration, the five commands
//! and their exit-code mapping.

pub mod commands;
pub mod config;
pub mod error;

pub use config::RunConfig;
pub use error::{CliError, CliResult};
