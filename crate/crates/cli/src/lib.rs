//! Command-line front end: corpus generation, pair previews, training,
//! inference, evaluation and the inference service.

pub mod commands;
pub mod config;
pub mod error;

pub use commands::{run, Cli, Command};
pub use error::{CliError, Result};
