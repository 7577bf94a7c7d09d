//! Forward operators, measurement noise and sparsifying transforms.

mod noise;
mod operator;
mod sparsity;

pub use noise::NoiseModel;
pub use operator::{fourier_rows, gaussian_kernel, MeasurementModel, MeasurementSpec, OperatorSpec};
pub use sparsity::{project_topk, topk_residual_l1, SparsityModel, SparsitySpec, TransformSpec};
