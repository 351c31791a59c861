//! Asymmetric two-modality feature fusion.
//!
//! The crate bundles a small tensor library with tape-based reverse-mode
//! autodiff, per-modality batch normalization, the channel-shuffle and
//! pixel-shift fusion operations, a multi-branch segmentation network,
//! a synthetic dataset generator, and the experiment harness behind the
//! `asymfusion` binary.

pub mod autodiff;
pub mod error;
pub mod fusion;
pub mod harness;
pub mod network;
pub mod norm;
pub mod rng;
pub mod synth;
pub mod tensor;

pub use error::{Error, Result};
