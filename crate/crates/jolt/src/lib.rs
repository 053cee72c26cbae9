//! IO, evaluation and command-line companion to `jolt-core`.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod db;
pub mod error;
pub mod eval;
pub mod formats;
pub mod logging;

pub use error::{Error, Result};
