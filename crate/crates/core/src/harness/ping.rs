//! ICMP echo probes injected into a split-tunnel pump.

use std::net::Ipv4Addr;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use crate::splitnet::{echo_request, parse_echo, InjectionHandle, ICMP_ECHO_REPLY};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PingParams {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub identifier: u16,
    pub count: u16,
    pub interval: Duration,
    pub timeout: Duration,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Probe {
    pub sequence: u16,
    /// `None` when no reply came within the timeout.
    pub rtt_ms: Option<f64>,
}

/// Sends `count` echo requests, one per `interval`, each waiting for its
/// reply up to `timeout`. Sequence numbers start at `first_seq`.
pub async fn ping_over_tunnel(handle: &mut InjectionHandle, params: &PingParams, first_seq: u16) -> Vec<Probe> {
    let mut probes = Vec::with_capacity(params.count as usize);
    let payload: Vec<u8> = (0..32u8).collect();
    for i in 0..params.count {
        let seq = first_seq.wrapping_add(i);
        let started = Instant::now();
        let req = echo_request(params.src, params.dst, params.identifier, seq, &payload);
        if handle.outbound.send(req).await.is_err() {
            probes.push(Probe { sequence: seq, rtt_ms: None });
            continue;
        }
        let deadline = started + params.timeout;
        let mut rtt = None;
        while let Ok(Some(packet)) = tokio::time::timeout_at(deadline.into(), handle.inbound.recv()).await {
            let Some(echo) = parse_echo(&packet) else { continue };
            if echo.icmp_type == ICMP_ECHO_REPLY && echo.identifier == params.identifier && echo.sequence == seq {
                rtt = Some(started.elapsed().as_secs_f64() * 1000.0);
                break;
            }
        }
        probes.push(Probe { sequence: seq, rtt_ms: rtt });
        tokio::time::sleep_until((started + params.interval).into()).await;
    }
    probes
}
