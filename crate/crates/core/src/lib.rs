pub mod admin;
pub mod control;
pub mod harness;
pub mod model;
pub mod netsim;
pub mod policy;
pub mod proxy;
pub mod splitnet;
pub mod wire;
