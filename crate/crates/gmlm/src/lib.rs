//! File formats, the multi-seed experiment runner, and the `gmlm` command
//! line on top of `gmlm-core`.

pub mod cli;
pub mod config;
pub mod error;
pub mod formats;
pub mod run;

pub use config::RunConfig;
pub use error::{Error, Result};
