pub mod classifiers;
pub mod data;
pub mod detect;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod inception;
pub mod nn;
pub mod ops;
pub mod registry;
pub mod scalar;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use tensor::Tensor;
