//! IP assisting component: IPv4 parsing, split-tunnel classification,
//! IP-in-UDP framing and ICMP echo turnaround at tunnel endpoints.

mod checksum;
mod icmp;
mod ipv4;
mod pump;
mod table;

pub use checksum::internet_checksum;
pub use icmp::{echo_request, icmp_echo_turnaround, parse_echo, EchoFields, ICMP_ECHO_REPLY, ICMP_ECHO_REQUEST};
pub use ipv4::{build_ipv4, decapsulate, encapsulate, parse_ipv4, Ipv4Head, Malformed, PROTO_ICMP, PROTO_TCP, PROTO_UDP};
pub use pump::{injection_pair, run_echo_endpoint, EchoEndpointStats, InjectionHandle, PacketSource, PumpStats, TunnelClient};
pub use table::{Ipv4Prefix, PrefixError, SplitTable};
