pub mod batch;
pub mod classifier;
pub mod cli;
pub mod error;
pub mod eval;
pub mod generator;
pub mod gmp;
pub mod graph;
pub mod kv;
pub mod learners;
pub mod pipeline;
pub mod rl;
pub mod rng;
pub mod sim;

pub use error::{RainError, Result};
pub use graph::RelationGraph;
