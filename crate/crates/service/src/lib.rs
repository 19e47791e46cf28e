//! Artifact store, HTTP API and command-line driver.

pub mod cli;
pub mod config;
pub mod error;
pub mod http;
pub mod ops;
pub mod store;

pub use error::{ApiError, ErrorCode};
