//! Loopback port allocation for tests and scenarios.

use std::net::{Ipv4Addr, SocketAddr, TcpListener, UdpSocket};

/// A port that was free for both TCP and UDP a moment ago. The OS hands out
/// ephemeral ports in rotation, so reuse within a run is unlikely.
pub fn free_port() -> u16 {
    loop {
        let tcp = TcpListener::bind((Ipv4Addr::LOCALHOST, 0)).expect("bind ephemeral port");
        let port = tcp.local_addr().unwrap().port();
        if UdpSocket::bind((Ipv4Addr::LOCALHOST, port)).is_ok() {
            return port;
        }
    }
}

pub fn free_addr() -> SocketAddr {
    SocketAddr::from((Ipv4Addr::LOCALHOST, free_port()))
}
