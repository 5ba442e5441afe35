//! Staged command-line pipeline over the `uqkit` library: synthetic data,
//! embedding and clustering, model search, uncertainty estimates,
//! evaluation and a verified report.

pub mod config;
pub mod error;
pub mod manifest;
pub mod pipeline;
pub mod verify;

pub use config::RunConfig;
pub use error::{CliError, Result};
pub use pipeline::Pipeline;
