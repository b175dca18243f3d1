//! Storage, evaluation and command-line driver for [`logra_core`].
//!
//! The core crate holds the numerical algorithms and is `no_std`. This crate
//! adds everything that touches the file system or threads: the binary
//! artifact formats, the memory-mapped gradient store, parallel scoring, the
//! retraining harness and the pipeline behind the `logra` binary.

mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod format;
pub mod gradstore;
pub mod pipeline;
pub mod scoring;

pub use error::{Error, Result};
pub use logra_core as core;
