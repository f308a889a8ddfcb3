//! Loopback tooling for tests and scenarios: stub servers, traffic
//! generators, an in-process overlay and the scenarios built on them.

pub mod builders;
pub mod chunks;
pub mod files;
pub mod overlay;
pub mod ping;
pub mod ports;
pub mod report;
pub mod scenarios;
pub mod stubs;
pub mod udp_stream;
