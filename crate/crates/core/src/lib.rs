//! Receptive-field regularized convolutional networks for low-complexity audio
//! classification: frequency damping, decomposed convolutions, width restriction and
//! ramped magnitude pruning, plus the tooling to measure their receptive fields.

pub mod checkpoint;
pub mod config;
pub mod damping;
pub mod decomposition;
pub mod erf;
pub mod error;
pub mod features;
pub mod model;
pub mod ops;
pub mod pruning;
pub mod rf;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;
