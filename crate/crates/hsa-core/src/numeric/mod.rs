//! Dense tensors, the differentiable op catalog, gradient checking, and SGD.

pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod matmul;
pub mod optim;
pub mod tensor;

pub use gradcheck::{finite_diff_check, FiniteDiffReport};
pub use graph::{Bindings, Gradients, Graph, Mode, NodeId, ParamStore, Slot};
pub use optim::{cosine_lr, sgd_update, sgd_update_grouped, OptimState};
pub use tensor::{dot, l2_normalize_slice, Precision, Scalar, Tensor};
