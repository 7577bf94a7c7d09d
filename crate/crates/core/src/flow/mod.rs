//! Normalizing flows built from invertible blocks, unconditional and
//! conditioned on a measurement.

mod blocks;
pub mod checkpoint;
mod conditional;
mod mlp;
mod model;

pub(crate) use model::std_normal_log_density;

pub use blocks::BlockSpec;
pub use conditional::{ConditionalArch, ConditionalFlowModel, ConditionerSpec};
pub use mlp::Activation;
pub use model::{default_steps, latent_batch, FlowArch, FlowModel, DEFAULT_CLAMP, DEFAULT_HIDDEN};

#[cfg(test)]
mod tests;
