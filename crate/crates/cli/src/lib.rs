//! Config loading, schedule files, SVG rendering and the subcommands behind
//! the `fuseplan` binary.

pub mod commands;
pub mod config;
pub mod error;
pub mod schedule_file;
pub mod svg;

pub use error::{CliError, CliResult};
