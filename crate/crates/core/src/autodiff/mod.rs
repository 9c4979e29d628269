//! Reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! Graphs are built once, evaluated against named [`Bindings`], and then
//! differentiated from any evaluated node. Besides the usual elementwise and
//! matrix operations the graph knows the Poincaré-ball operations used by the
//! separation model, each with a closed-form backward pass.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, relative_error, GradCheckEntry, GradCheckReport, GRAD_ZERO_FLOOR};
pub use graph::{Bindings, CustomOp, GradientSet, Graph, NodeId};
pub use tensor::Tensor;
