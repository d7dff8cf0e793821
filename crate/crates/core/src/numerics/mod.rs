//! Dense tensors and a tape-based reverse-mode autodiff engine.

mod graph;
mod gradcheck;
pub mod kernels;
mod pairs;
mod param;
mod scalar;
mod tensor;

pub use gradcheck::{finite_diff_gradcheck, gradcheck_params, GradCheck};
pub use graph::{Graph, Var};
pub use pairs::{PairList, Segments};
pub use param::{ParamId, ParamStore, Parameter};
pub use scalar::Scalar;
pub use tensor::Tensor;
