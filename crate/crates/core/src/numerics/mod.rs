//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! The engine is define-by-run: a [`Tape`] records every operation whose
//! inputs participate in gradient tracking, and a single reverse sweep
//! over the recording order computes all adjoints. Everything is 64-bit;
//! broadcasting is limited to scalar-with-tensor and trailing-axis
//! vectors, which is all the model needs.

mod adam;
mod gradcheck;
mod tape;
mod tensor;

pub use adam::AdamState;
pub use gradcheck::{grad_check, grad_check_named, GradCheckReport};
pub use tape::{Gradients, Tape, MASK_NEG};
pub use tensor::Tensor;
