//! Service API, live stream and command-line client for the orchestrator.

pub mod api;
pub mod backend;
pub mod server;
