//! Command-line front end: argument parsing, run manifests, the pipeline
//! driver and report rendering.

pub mod commands;
pub mod error;
pub mod io;
pub mod manifest;
pub mod pipeline;
pub mod report;

pub use commands::{run, Cli};
pub use error::{CliError, CliResult};
