//! Table-image-to-LaTeX recognition core.
//!
//! Everything in this crate is pure computation over in-memory data and builds
//! without `std` (an allocator is required). File formats, checkpoints and the
//! command-line front end live in the `tablatex` crate.

#![cfg_attr(not(feature = "std"), no_std)]

extern crate alloc;

pub mod augment;
pub mod ensemble;
mod error;
pub mod image;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod rng;
pub mod stats;
pub mod synth;
pub mod train;
pub mod vocab;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use vocab::{Category, Task, Token, TokenSequence, Vocabulary};
