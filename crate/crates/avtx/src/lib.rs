//! File formats, checkpoints, run configuration, profiling and the
//! command-line driver around `avtx-core`.

pub mod binio;
pub mod checkpoint;
pub mod config;
pub mod error;
pub mod formats;
pub mod profile;
pub mod run;

pub use error::{Error, Result};
