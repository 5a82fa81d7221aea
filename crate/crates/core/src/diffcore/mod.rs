//! Dense `f64` tensors, reverse-mode gradients and gradient verification.

mod gradcheck;
mod graph;
pub mod nn;
mod tensor;

pub use gradcheck::{finite_diff_check, finite_diff_check_all, relative_error, GradReport, Probe};
pub use graph::{
    cosine, cosine_similarity, primitive_set, CustomBackward, Graph, Primitive, Var,
    LAYER_NORM_EPS,
};
pub(crate) use graph::softmax_in_place;
pub use tensor::{Tensor, TENSOR_MAGIC};
