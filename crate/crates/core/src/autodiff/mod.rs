//! Reverse-mode autodiff: tape, parameter registry, finite-difference
//! checks.

pub mod gradcheck;
pub mod math;
pub mod params;
pub mod scalar;
pub mod tape;

#[cfg(test)]
mod tests;

pub use gradcheck::{grad_check, GradCheckReport};
pub use params::{Binding, Gradients, ParamGroup, ParamId, ParamStore};
pub use scalar::{Dtype, Scalar};
pub use tape::{NodeId, Tape, NEG_MASK};
