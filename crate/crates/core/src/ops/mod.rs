//! Differentiable tensor operations used by the classifiers.
//!
//! Each operation has a forward function and, where it carries gradients, a
//! matching backward function that consumes the upstream gradient.

pub mod activation;
pub mod batchnorm;
pub mod conv;
pub mod linear;
pub mod loss;
pub mod pool;

pub use activation::{relu, selu, Activation, Relu, Selu, SeluConstants};
pub use batchnorm::{batchnorm, BatchNormState, BnMode};
pub use conv::{conv2d, macs_per_output_pixel, Conv2dGeometry};
pub use linear::linear;
pub use loss::{softmax, softmax_cross_entropy};
pub use pool::{maxpool2d, Pool2dGeometry};
