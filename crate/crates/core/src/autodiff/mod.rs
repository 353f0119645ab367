//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Operators record themselves on a [`Tape`]; [`Tape::backward`] walks the
//! recording in reverse and returns gradients for every differentiable leaf.
//! Everything runs in `f64` and single-threaded, so replaying a tape on the
//! same inputs is bitwise reproducible.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{
    compare_with_central_differences, grad_check, relative_error, value_and_grad,
    GradCheckReport,
};
pub use tape::{Gradients, Parameter, Tape, Var, LOG_CLAMP};
pub use tensor::Tensor;

pub(crate) use tape::soft_ce_value;
