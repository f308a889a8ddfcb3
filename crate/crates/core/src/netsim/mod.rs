//! Loopback stand-in for `tc`: relays that add loss, latency and slotted
//! intermittent connectivity between two endpoints.

mod impair;
mod relay;
mod schedule;

pub use impair::{DownBehavior, ImpairmentSpec, Impairer, Verdict};
pub use relay::{Relay, RelaySpec, RelayStats};
pub use schedule::{link_state, LinkSchedule, LinkState, ScheduleParseError};
