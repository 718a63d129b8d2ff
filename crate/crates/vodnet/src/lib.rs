//! File formats, the threaded trainer, experiment runs and the command line
//! around `vodnet-core`.

pub mod async_train;
pub mod cli;
pub mod config;
pub mod error;
pub mod experiment;
pub mod io;

pub use error::{CliError, Result};
