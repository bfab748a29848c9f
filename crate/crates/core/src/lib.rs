//! Self-normalizing flows: normalizing flows trained with learned inverse
//! weights in place of inverse-Jacobian log-determinant gradients.

pub mod checkpoint;
pub mod conv;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod gradients;
pub mod layers;
pub mod linalg;
pub mod model;
pub mod preprocess;
pub mod tensor;
pub mod training;

pub use error::{Result, SnfError};
pub use tensor::Tensor;
