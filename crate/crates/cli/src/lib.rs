//! File formats, report rendering and the `relabel` command-line pipeline
//! on top of `relabel-core`.

pub mod commands;
pub mod config;
pub mod error;
pub mod io;
pub mod report;

pub use commands::{execute, Cli, Command};
pub use error::{CliError, CliResult, ExitKind};
