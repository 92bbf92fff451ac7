//! Reverse-mode automatic differentiation over dense arrays.

mod conv;
mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheck};
pub use tape::{BinaryOp, Tape, UnaryOp, Var, KEEP};
pub use tensor::Tensor;
