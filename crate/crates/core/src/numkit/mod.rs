//! Dense `f64` tensors with a tape-based reverse-mode differentiator and an
//! Adam optimizer. Everything the encoder and the ranking losses need, and
//! nothing more.

mod optim;
mod tape;
mod tensor;

pub use optim::{adam_step, AdamConfig, AdamState};
pub use tape::{GradBuffer, Gradients, ParamGrad, ParamId, ParamStore, Tape, Var};
pub use tensor::{log_sigmoid, logsumexp, sigmoid, softmax_in_place, Tensor};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NumError {
    #[error("dimension error: {0}")]
    Dimension(String),
    #[error("index {index} out of range (bound {bound})")]
    Index { index: usize, bound: usize },
    #[error("config error: {0}")]
    Config(String),
    #[error("non-finite value produced by {0}")]
    NonFinite(String),
}

#[cfg(test)]
mod tests;
