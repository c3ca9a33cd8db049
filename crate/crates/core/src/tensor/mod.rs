//! Dense matrices and reverse-mode automatic differentiation.

mod fd;
mod graph;
mod matrix;

pub use fd::{finite_diff_grad, max_relative_error};
pub use graph::{bce_value, sigmoid, softmax, Activation, Graph, Var, PROB_CLAMP};
pub use matrix::Matrix;
