//! Multi-scale residual 1-D convolutional networks for eight-class protein
//! secondary structure prediction, with a small reverse-mode autodiff engine,
//! training loop, data pipeline and label-conditioned beam-search decoding.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod ops;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
