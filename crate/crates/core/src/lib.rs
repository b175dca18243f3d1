//! Kronecker-factored low-rank gradient projection for influence functions.
//!
//! This crate holds the pure algorithmic side: dense linear algebra, a small
//! feed-forward network with explicit backprop that exposes per-layer
//! activations, the projection itself, curvature statistics and influence
//! scoring. It is `no_std` and only needs `alloc`; file formats, the gradient
//! store, the evaluation harness and the CLI live in the `logra` crate.

#![no_std]
// `!(x > 0.0)` is how NaN gets rejected along with the rest.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod error;
pub mod influence;
pub mod nn;
pub mod numerics;
pub mod projection;
pub mod stats;

#[cfg(test)]
mod testutil;

pub use error::{Error, Result};
pub use numerics::{EigenDecomposition, Matrix};
