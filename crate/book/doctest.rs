//! Every chapter is a module so `cargo test --doc -p csilocal-book` runs
//! the listings and a failure names its chapter.

#[doc = include_str!("src/introduction.md")]
pub mod introduction {}
#[doc = include_str!("src/tensors.md")]
pub mod tensors {}
#[doc = include_str!("src/model.md")]
pub mod model {}
#[doc = include_str!("src/split-training.md")]
pub mod split_training {}
#[doc = include_str!("src/pipeline.md")]
pub mod pipeline {}
#[doc = include_str!("src/baselines.md")]
pub mod baselines {}
#[doc = include_str!("src/data.md")]
pub mod data {}
#[doc = include_str!("src/experiments.md")]
pub mod experiments {}
