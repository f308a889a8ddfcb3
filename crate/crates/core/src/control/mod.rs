//! Controller side of config distribution, and the agent a proxy runs to
//! receive it.

pub mod auth;
pub mod client;
pub mod registry;
pub mod server;
pub mod store;

pub use auth::{authenticate, Reject, Secrets, SecretsError};
pub use client::{run_agent, AgentError};
pub use registry::{NodeRegistry, NodeView, PushResult};
pub use server::{start_controller, Controller, ControllerHandle, ControllerOptions, DEFAULT_POLL_INTERVAL};
pub use store::ConfigStore;
