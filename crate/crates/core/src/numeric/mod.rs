//! Dense tensors, a reverse-mode gradient tape, and a finite-difference
//! gradient checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub(crate) use graph::softmax_in_place;
#[cfg(test)]
pub(crate) use graph::{gelu_scalar, sigmoid_scalar};
pub use tensor::Tensor;
