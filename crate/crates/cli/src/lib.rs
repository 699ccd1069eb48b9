//! Command-line tools and HTTP service for intent-aware grasp planning.
//!
//! * [`commands`]: the `intentgrasp` command line.
//! * [`service`]: the HTTP API over a registry of fitted models.
//! * [`ops`]: operations and reports shared by both front-ends.
//! * [`reference`]: reference target vectors and reconstructions.

pub mod commands;
pub mod error;
pub mod ops;
pub mod reference;
pub mod service;

pub use error::CliError;
