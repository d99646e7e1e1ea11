//! Experiment harness: configuration, dataset scenarios, protocols and reports.

pub mod active;
pub mod bench;
pub mod config;
pub mod protocols;
pub mod report;
pub mod scenario;
pub mod soak;
