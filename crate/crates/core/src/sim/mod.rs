//! Scenario-driven simulation of an instance under load while it scales.

pub mod engine;
pub mod export;
pub mod log;
pub mod metrics;
pub mod perf;
pub mod presets;
pub mod report;
pub mod runner;
pub mod scenario;
pub mod strategy;
pub mod suite;
pub mod workload;
