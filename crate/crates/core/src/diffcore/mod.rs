//! Minimal reverse-mode differentiation substrate.

mod gradcheck;
mod graph;
pub mod kernels;
mod params;
mod tensor;

pub use gradcheck::{finite_diff_check, relative_error, FdReport};
pub use graph::{fault, Grads, Graph, Primitive, Var};
pub use params::{Binder, ParamId, ParamStore};
pub use tensor::{Real, Tensor, MAX_RANK};
