//! Training-free detection and counting of repeating objects from one
//! boxed example.
//!
//! [`pipeline::run_detect`] runs everything end to end; the modules expose
//! each stage on its own.

// Validation uses `!(x > 0.0)` on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod classifier;
pub mod detection;
pub mod error;
pub mod features;
pub mod imaging;
pub mod mining;
pub mod pipeline;
pub mod structure;
pub mod synth;

pub use error::{Error, Result, Stage, StageError};
