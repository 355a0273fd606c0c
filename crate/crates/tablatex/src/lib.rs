//! File formats, checkpoints, run configuration and the command-line front
//! end for [`tablatex_core`].

pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod error;
pub mod formats;

pub use error::{Error, Result};
