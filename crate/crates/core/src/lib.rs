//! Deterministic federated learning simulator.
//!
//! Clients train small classifiers on IID partitions, a configurable subset
//! turns Byzantine from a given round, and the server combines submissions
//! with one of six aggregation rules. The loss-clustering rule scores each
//! submission on trusted server data and averages only the low-loss group.

pub mod aggregators;
pub mod attacks;
pub mod cli;
pub mod config;
pub mod data;
pub mod error;
pub mod math;
pub mod model;
pub mod orchestrator;
pub mod results;

pub use error::{FedError, Result};
