//! Learning invertible generative models of objects from noisy, incomplete
//! linear measurements, together with the downstream inference tools and the
//! numerical checks of the supporting theory.
//!
//! Everything numerical is generic over [`Scalar`] (`f32` or `f64`). The
//! aliases at the crate root fix the scalar to `f64`, which is what the
//! training pipeline, checkpoints and CLI use.

pub mod analysis;
pub mod diff;
pub mod imaging;
pub mod inference;
pub mod objectives;
pub mod error;
pub mod flow;
pub mod rng;
pub mod scalar;
pub mod training;

#[cfg(test)]
mod testkit;

pub use error::{Error, Result};
pub use rng::RngStream;
pub use scalar::Scalar;

pub type Tensor = diff::Tensor<f64>;
pub type Graph = diff::Graph<f64>;
pub type ParameterStore = diff::ParameterStore<f64>;
pub type FlowModel = flow::FlowModel<f64>;
pub type ConditionalFlowModel = flow::ConditionalFlowModel<f64>;
