//! Staged multimodal conditioning for enzyme-kinetics regression.
//!
//! Everything here is `no_std` + `alloc`: tensors, the differentiable op
//! record, the model stages, losses, the optimizer and evaluation metrics.
//! File formats, datasets and the command line live in the `erba` crate.

#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod backbone;
pub mod emb;
pub mod error;
pub mod esda;
pub mod gmoe;
pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod math;
pub mod metrics;
pub mod model;
pub mod mrca;
pub mod objective;
pub mod ops;
pub mod optim;
pub mod params;
pub mod tensor;
pub mod vocab;

pub use error::{Error, Result};
pub use graph::{Graph, NodeId};
pub use params::{ParamGrads, ParamId, ParamStore};
pub use tensor::Tensor;
