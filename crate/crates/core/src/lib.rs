pub mod cli;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nets;
pub mod protect;
pub mod seeds;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Graph, Tensor, Var};
