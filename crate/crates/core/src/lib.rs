//! Light transformer encoder with a 6-dimensional concatenated relative
//! position encoding, the additive/relative baselines it is compared
//! against, and everything needed to train and evaluate them on
//! intent/speaker classification at desk scale.
//!
//! Everything runs in `f64` on a small tape-based reverse-mode
//! differentiation engine ([`tape`]).

pub mod attention;
pub mod checkpoint;
pub mod classifier;
pub mod data;
pub mod encoder;
pub mod error;
pub mod gradcheck;
pub mod metrics;
mod kernels;
pub mod ops;
pub mod position;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
