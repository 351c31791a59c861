//! Parameter-free asymmetric fusion operations and probes for the
//! symmetric/asymmetric fusion-block definition.
//!
//! A fusion block `F(x1, x2; theta)` is symmetric when, for every `theta1`
//! and pointwise convolution `C1`, some `theta2` and `C2` satisfy
//! `C1(F(x1, x2; theta1)) == C2(F(x2, x1; theta2))` for all inputs.

mod ops;
mod symmetry;

pub use ops::*;
pub use symmetry::*;

pub(crate) use ops::{check_split, mix_channels, pixel_shift_adjoint};
