//! Spatio-temporal traffic forecasting on road-sensor graphs.
//!
//! The crate bundles a small reverse-mode tensor engine ([`tensor`]), graph
//! ingestion and learned adjacency generation ([`graph`]), the bidirectional
//! graph-recurrent network with per-node temporal attention ([`model`]), data
//! windowing ([`data`]) and the training/evaluation pipeline ([`train`]).

pub mod data;
pub mod error;
pub mod graph;
pub mod model;
mod real;
pub mod rng;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use real::{DType, Real};
pub use tensor::{Tape, Tensor, Var};

/// Default element type: `f32`, or `f64` with the `f64` feature.
#[cfg(not(feature = "f64"))]
pub type Scalar = f32;
#[cfg(feature = "f64")]
pub type Scalar = f64;
