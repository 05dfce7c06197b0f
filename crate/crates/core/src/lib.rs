//! Environment-probing interaction (EPI) policies.
//!
//! A short probing policy interacts with an environment whose physical
//! parameters are unknown; its trajectory is compressed by an embedding
//! network into a vector that makes the environment's transitions easier to
//! predict. A task policy then acts on the observation concatenated with that
//! embedding.

pub mod binio;
pub mod checkpoint;
pub mod config;
pub mod dataset;
pub mod envsim;
pub mod epimodel;
pub mod error;
pub mod eval;
pub mod nn;
pub mod policy;
pub mod rng;
pub mod runner;
pub mod training;

pub use error::{Error, Result};
