//! Multi-branch fusion network: shared-convolution encoder with private
//! norms, fusion residual blocks, shared decoder, ensemble head,
//! distillation loss, parameter accounting and the SGD step.

mod config;
mod loss;
mod model;
mod params;
mod train;

pub use config::*;
pub use loss::*;
pub use model::*;
pub use params::*;
pub use train::*;
