//! Experiment configuration, orchestration and metrics export.

mod compare;
mod config;
mod run;

pub use compare::*;
pub use config::*;
pub use run::*;
