//! Synthetic multimodal segmentation data with complementary modalities,
//! its Bayes accuracy ceilings, and segmentation metrics.

mod bayes;
mod data;
mod metrics;

pub use bayes::*;
pub use data::*;
pub use metrics::*;
