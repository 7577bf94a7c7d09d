//! Reverse-mode automatic differentiation over dense tensors.

pub mod aftn;
mod check;
pub mod fft;
mod graph;
mod params;
mod tensor;

pub use check::{finite_diff_check, FdReport};
pub use graph::{Binary, Gradients, Graph, Op, Unary, Var};
pub use params::ParameterStore;

/// Correlation with a centered kernel over periodic `[h, w]` planes: the
/// adjoint of [`Graph::circ_conv2`].
pub fn circ_corr2<S: crate::Scalar>(
    x: &[S],
    h: usize,
    w: usize,
    kernel: &[S],
    kh: usize,
    kw: usize,
) -> Vec<S> {
    graph::conv2_periodic(x, h, w, kernel, kh, kw, true)
}
pub use tensor::Tensor;
