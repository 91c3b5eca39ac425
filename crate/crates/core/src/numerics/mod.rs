//! Dense tensor substrate: kernels, named parameters, a reverse-mode tape
//! and the finite-difference oracle used to check it.

pub mod fd;
mod graph;
mod param;
mod tensor;

pub use fd::{central_difference, finite_diff_grad, relative_error};
pub use graph::{AttentionShape, Gradients, Graph, Var};
pub use param::{ParamStore, Parameter};
pub use tensor::{
    gelu, gelu_grad, matmul, matmul_nt, matmul_tn, softmax_axis, top_k_indices, Tensor,
};
pub(crate) use tensor::top_k;
