//! The dataplane: listeners, header routing, tunnels, retries and hot swap.

mod engine;
pub mod io;
pub mod lb;
pub mod retry;
pub mod routing;
mod session;
pub mod stats;
mod upstream;

pub use engine::{listener_key, Proxy, SwapError, SwapReport};
pub use lb::ClusterState;
pub use retry::{execute_with_retry, AttemptError, Outcome};
pub use routing::{host_name, outgoing_headers, route, NoRoute, RouteDecision, RoutingInput};
pub use session::DEFAULT_DATAGRAM_IDLE;
pub use stats::{ClusterSnapshot, ListenerSnapshot, Stats, StatsSnapshot};
