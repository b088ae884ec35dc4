//! Tabular-policy laboratory for token-level analysis of reinforcement
//! learning with verifiable rewards.

pub mod bandit;
pub mod cli;
pub mod config;
pub mod decode;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod policy;
pub mod rlvr;
pub mod seed;
pub mod stats;
pub mod task;

pub use error::{LabError, Result};
