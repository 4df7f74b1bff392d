//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! Everything the agent network needs is a 2-D matrix whose rows are
//! independent samples (agents, rollouts, images). Ops are recorded on a
//! [`Tape`] and evaluated eagerly; [`Tape::backward`] walks the tape once in
//! reverse. The only broadcast is adding a bias vector to every row.

mod real;
mod tape;
mod tensor;

pub mod check;

pub use real::Real;
pub use tape::{BackwardStats, RowMix, Tape, Var};
pub use tensor::{Tensor, TensorError};

/// Scalar type used by the binaries and the trainer defaults.
#[cfg(not(feature = "f64"))]
pub type DefaultReal = f32;
#[cfg(feature = "f64")]
pub type DefaultReal = f64;
