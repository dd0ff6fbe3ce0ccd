//! File formats, corpus IO, configuration and the `spectra` command line
//! around `spectra-core`.
//!
//! * [`formats`]: `DCKPT1` checkpoints and `SGEO1` rasters.
//! * [`dataset`]: manifest generation and loading.
//! * [`config`]: the TOML run configuration.
//! * [`pipeline`]: training and evaluation over a manifest.
//! * [`report`]: Markdown rendering of logs and reports.
//! * [`cli`]: subcommands and exit codes.

pub mod cli;
pub mod config;
pub mod dataset;
mod error;
pub mod formats;
pub mod pipeline;
pub mod report;

pub use error::{Error, Result};
