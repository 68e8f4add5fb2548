//! Position-sensitive axial attention and Axial-ResNet models on a small
//! reverse-mode differentiation core, together with slow reference
//! implementations, cost accounting, benchmarks and a toy long-range task.

pub mod analysis;
pub mod attention;
pub mod autodiff;
pub mod error;
pub mod io;
pub mod model;
pub mod oracle;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{DType, Scalar, Shape, Tensor};
