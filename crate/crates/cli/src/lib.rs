//! Command-line front end: configuration, subcommands and output bookkeeping.

pub mod commands;
pub mod config;
pub mod error;
pub mod output;

pub use config::{Overrides, RunConfig};
pub use error::{CliError, Result};
