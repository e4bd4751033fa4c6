//! A small CPU deep-learning engine for binary wildfire image classification.
//!
//! The numeric core is generic over [`Scalar`] (`f32` for training, `f64`
//! for gradient checks). Modules, bottom-up:
//!
//! - [`tensor`]: dense arrays and convolution/pooling kernels
//! - [`nn`]: layer specs, parameter counting, forward/backward
//! - [`zoo`]: the six reference architectures and head surgery
//! - [`optim`]: losses and optimizers
//! - [`data`]: image IO, augmentation, manifests, batching, synthetic data
//! - [`metrics`]: confusion matrices and derived rates
//! - [`checkpoint`]: the `WFCK` tensor file format
//! - [`harness`]: experiment configs, training loops, reports

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod scalar;
pub mod tensor;
pub mod zoo;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor32 = tensor::Tensor<f32>;
pub type Tensor64 = tensor::Tensor<f64>;
pub type Model32 = nn::Model<f32>;
pub type Model64 = nn::Model<f64>;
