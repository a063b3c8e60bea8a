//! Experiment runner for the lensmimo toolkit: declarative TOML configs,
//! training verbs, evaluation sweeps and reproducible CSV + manifest output.

pub mod config;
pub mod error;
pub mod experiments;
pub mod output;
pub mod schemes;
pub mod train;

pub use config::RunConfig;
pub use error::{HarnessError, Result};
pub use schemes::Scheme;
