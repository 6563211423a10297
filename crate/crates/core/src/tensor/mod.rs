//! Dense tensors with a tape for reverse-mode differentiation.

mod fd;
mod graph;
pub(crate) mod kernels;
#[allow(clippy::module_inception)]
mod tensor;

pub use fd::{finite_diff_at, finite_diff_grad};
pub use graph::{BatchStats, Gradients, Graph, NormStats, Var};
pub use tensor::{rel_err, Tensor};

/// Numerical stabilizer inside batch normalization.
pub const BN_EPS: f64 = 1e-5;
