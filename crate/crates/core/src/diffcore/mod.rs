//! Dense reverse-mode differentiation over small vectors, plus Adam and a
//! finite-difference gradient checker.

mod adam;
mod gradcheck;
pub mod ops;
mod tape;
mod tensor;

pub use adam::Adam;
pub use gradcheck::{grad_check, relative_error, GradCheckReport};
pub use tape::{Adjoints, Tape, Var, BCE_CLAMP};
pub use tensor::{Gradients, ParamId, ParamStore, Tensor, CHECKPOINT_VERSION};
