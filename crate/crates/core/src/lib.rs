//! Training engine for small recurrent networks: identity-initialized ReLU
//! RNNs, tanh RNNs and LSTMs trained with clipped SGD on long-range
//! benchmarks (the adding problem and pixel-by-pixel MNIST).

// Validation is written as `!(x > 0.0)` so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cells;
pub mod error;
pub mod gradcheck;
pub mod harness;
pub mod init;
pub mod ndcore;
pub mod network;
pub mod optim;
pub mod tasks;

pub use error::{Error, Result};
