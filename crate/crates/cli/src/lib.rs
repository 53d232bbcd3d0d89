//! Library half of the `dsk` command: configuration, artifact layout and
//! the pipeline stages.

pub mod artifacts;
pub mod commands;
pub mod config;
pub mod error;

pub use artifacts::{Layout, Method, METHODS};
pub use config::RunConfig;
pub use error::CliError;
