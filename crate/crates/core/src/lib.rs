//! Report generation with a selective state-space encoder and a Transformer
//! decoder, built on an in-crate autodiff tensor core. Includes maximum
//! likelihood training with Adam, beam-search inference, NLG/CE evaluation
//! metrics, and an analytic parameter/FLOP profiler.

pub mod checkpoint;
pub mod counter;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod features;
pub mod fsutil;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod nn;
pub mod scalar;
pub mod ssm;
pub mod tensor;
pub mod train;
pub mod text;

pub use error::Error;
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorError};
