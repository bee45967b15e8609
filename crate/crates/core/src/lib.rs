//! Gated satellite/road-map attention fusion for cross-view drone
//! geo-localization, built on a small reverse-mode autograd core.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoder;
pub mod error;
pub mod fusion;
pub mod gradcheck;
pub mod graph;
pub mod losses;
pub mod model;
pub mod nn;
pub mod parallel;
pub mod params;
pub mod retrieval;
pub mod tensor;
pub mod trainer;
pub mod verify;

pub use error::{Error, Result};
pub use graph::{Graph, Var};
pub use params::{Gradients, ParamId, ParamStore, Parameter};
pub use tensor::{Tensor, TensorError};
