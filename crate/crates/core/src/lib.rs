//! Federated urgent-computing orchestrator.

pub mod assets;
pub mod ensemble;
pub mod federator;
pub mod fleet;
pub mod gateway;
pub mod store;
pub mod system;
pub mod workflow;
pub mod workloads;

/// Simulated time in whole seconds.
pub type SimTime = u64;
