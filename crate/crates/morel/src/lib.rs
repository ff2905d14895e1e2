//! Storage, scheduling and tooling around `morel-core`.

pub mod cli;
pub mod codec;
pub mod config;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod format;
pub mod imageio;
pub mod inference;
pub mod pipeline;
pub mod store;

pub use error::{Error, Result};
