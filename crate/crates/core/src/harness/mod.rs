//! Experiment harness: training runner, run configuration, checkpoints,
//! ablation experiments and the gradient-check suite.

mod checkpoint;
mod cli;
mod config;
mod experiment;
mod gradsuite;
mod runner;

pub use checkpoint::*;
pub use cli::*;
pub use config::*;
pub use experiment::*;
pub use gradsuite::*;
pub use runner::*;
