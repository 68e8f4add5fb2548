//! Reverse-mode differentiation over [`Tensor`](crate::tensor::Tensor)s.

mod finite_diff;
mod ops;
mod tape;

pub use finite_diff::finite_difference_grad;
pub use ops::{matmul, softmax_lastaxis, Conv2dGeometry};
pub use tape::{Backward, Gradients, Tape, Var};
