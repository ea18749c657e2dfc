//! File formats, thread pool and command-line driver around
//! [`cirlab_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod exec;
pub mod files;
pub mod manifest;
pub mod ppm;
pub mod report;

pub use error::{CliError, Result};
