//! File formats, synthetic data, training and evaluation around `erba-core`.

pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod synth;
pub mod train;

pub use error::{Error, Result};
