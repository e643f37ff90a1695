//! Frozen-backbone video recognition with a spatiotemporal decoder head.

pub mod backbone;
pub mod checkpoint;
pub mod costmodel;
pub mod dataset;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod model;
pub mod optim;
pub mod params;
pub mod pipeline;
pub mod rng;
pub mod sampling;
pub mod temporal;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
