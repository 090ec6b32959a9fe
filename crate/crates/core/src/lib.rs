//! Personalized federated learning with per-client feature selection.
//!
//! Each client runs a shared encoder whose universal features pass through a
//! local gate network; a Gumbel-Sigmoid mask with a straight-through hard
//! threshold splits them into task-relevant and task-irrelevant parts, each
//! with its own classifier. Only the encoder weights and the global
//! classifier are averaged by the server.
//!
//! All math is generic over [`Scalar`] (`f32` or `f64`); the aliases below fix
//! the element type for everyday use.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod analysis;
pub mod autodiff;
pub mod checkpoint;
pub mod datasets;
pub mod error;
pub mod federation;
pub mod losses;
pub mod metrics;
pub mod model;
mod scalar;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = autodiff::Tensor<f64>;
pub type Tensor32 = autodiff::Tensor<f32>;
pub type Tape64 = autodiff::Tape<f64>;
pub type Tape32 = autodiff::Tape<f32>;
pub type ClientModel64 = model::ClientModel<f64>;
pub type ClientModel32 = model::ClientModel<f32>;
