//! Dense tensors and a reverse-mode tape.

pub mod gradcheck;
pub mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use tape::{Gradients, RowPick, Tape, Var};
pub use tensor::{Real, Tensor};
