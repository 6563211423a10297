pub mod error;
pub mod real;
pub mod model;
pub mod baselines;
pub mod data;
pub mod harness;
pub mod optim;
pub mod pipeline;
pub mod protocol;
pub mod tensor;

pub use error::{Error, Result};
pub use optim::{Adam, AdamConfig, AdamState};
pub use real::Real;
pub use tensor::{Gradients, Graph, Tensor, Var};
