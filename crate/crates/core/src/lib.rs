//! Test-time adaptation on synthetic domain shifts.
//!
//! The crate holds the adaptable network ([`model`]), synthetic domain and
//! stream generators ([`shiftlab`]), the RBF-kernel MMD similarity score
//! ([`similarity`]), nine streaming adaptation policies ([`adapters`]) and
//! the benchmark engine that runs them across scenarios ([`harness`]).

// `!(x >= 0.0)` rejects NaN along with negatives
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapters;
pub mod error;
pub mod harness;
pub mod model;
pub mod numcore;
pub mod shiftlab;
pub mod similarity;

pub use error::{Error, Result};
