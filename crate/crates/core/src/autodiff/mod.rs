//! Reverse-mode automatic differentiation over dense `f64` tensors.

pub mod checkpoint;
mod fd;
mod graph;
pub(crate) mod kernels;
mod optim;
mod tensor;

pub use fd::{finite_difference_gradient, relative_error, FiniteDifference, DEFAULT_EPS};
pub use graph::{Gradients, Graph, NodeId, ParamStore};
pub use kernels::CellBox;
pub use optim::SgdMomentum;
pub use tensor::Tensor;
