//! Consensus certificates, gain thresholds and Monte Carlo validation for
//! multi-agent networks whose measurements carry relative-state-dependent
//! noise.

pub mod analysis;
pub mod config;
pub mod error;
pub mod experiment;
pub mod graph;
pub mod linalg;
pub mod noise;
pub mod sim;
pub mod stats;

pub use error::{Error, Result};
