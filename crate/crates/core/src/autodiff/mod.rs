//! Minimal dense reverse-mode automatic differentiation.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{analytic_gradients, grad_check, LossFn};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

pub(crate) use tape::softmax_in_place;
pub(crate) use tensor::{dot, norm};
