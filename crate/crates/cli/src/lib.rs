//! The chalkboard projector service: transports, devices, the coordinator
//! and the `abb` command line.

pub mod cli;
pub mod config;
pub mod coordinator;
pub mod devices;
pub mod service;
pub mod transport;

pub use config::ServiceConfig;
pub use coordinator::{Input, Outbound};
pub use service::{serve, start, Service};
