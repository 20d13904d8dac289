//! Obfuscated neural-network training.
//!
//! A model is hidden inside a larger network of decoy sub-networks and its
//! training data inside an augmented dataset with interleaved synthetic
//! values. The augmented pair is trained with plain minibatch SGD, after
//! which the original model is extracted with a local-only secret. The
//! crate also quantifies the privacy/overhead trade-off and runs
//! gradient-leakage attacks against plain and augmented setups.

pub mod attack;
pub mod augment;
pub mod cli;
pub mod data;
pub mod engine;
pub mod error;
pub mod extract;
pub mod fixtures;
pub mod ir;
pub mod privacy;
pub mod rng;
pub mod secret;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Array, DType, Float, Tensor, TensorData};
