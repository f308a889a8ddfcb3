use std::net::Ipv4Addr;

use super::checksum::internet_checksum;
use super::ipv4::{build_ipv4, parse_ipv4, PROTO_ICMP};

pub const ICMP_ECHO_REPLY: u8 = 0;
pub const ICMP_ECHO_REQUEST: u8 = 8;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EchoFields {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub icmp_type: u8,
    pub identifier: u16,
    pub sequence: u16,
    pub payload: Vec<u8>,
}

fn icmp_echo(icmp_type: u8, identifier: u16, sequence: u16, payload: &[u8]) -> Vec<u8> {
    let mut m = Vec::with_capacity(8 + payload.len());
    m.push(icmp_type);
    m.push(0);
    m.extend_from_slice(&[0, 0]);
    m.extend_from_slice(&identifier.to_be_bytes());
    m.extend_from_slice(&sequence.to_be_bytes());
    m.extend_from_slice(payload);
    let c = internet_checksum(&m);
    m[2..4].copy_from_slice(&c.to_be_bytes());
    m
}

pub fn echo_request(src: Ipv4Addr, dst: Ipv4Addr, identifier: u16, sequence: u16, payload: &[u8]) -> Vec<u8> {
    let icmp = icmp_echo(ICMP_ECHO_REQUEST, identifier, sequence, payload);
    build_ipv4(src, dst, PROTO_ICMP, 64, sequence, &icmp)
}

/// Decodes an ICMP echo request or reply, verifying both checksums.
pub fn parse_echo(packet: &[u8]) -> Option<EchoFields> {
    let head = parse_ipv4(packet).ok()?;
    if head.protocol != PROTO_ICMP {
        return None;
    }
    let icmp = &packet[head.payload_range()];
    if icmp.len() < 8 || internet_checksum(icmp) != 0 || icmp[1] != 0 {
        return None;
    }
    if icmp[0] != ICMP_ECHO_REQUEST && icmp[0] != ICMP_ECHO_REPLY {
        return None;
    }
    Some(EchoFields {
        src: head.src,
        dst: head.dst,
        icmp_type: icmp[0],
        identifier: u16::from_be_bytes([icmp[4], icmp[5]]),
        sequence: u16::from_be_bytes([icmp[6], icmp[7]]),
        payload: icmp[8..].to_vec(),
    })
}

/// Answers an echo request with a reply carrying the same identifier,
/// sequence and payload. Anything else (including replies) yields `None`.
pub fn icmp_echo_turnaround(packet: &[u8]) -> Option<Vec<u8>> {
    let req = parse_echo(packet)?;
    if req.icmp_type != ICMP_ECHO_REQUEST {
        return None;
    }
    let icmp = icmp_echo(ICMP_ECHO_REPLY, req.identifier, req.sequence, &req.payload);
    Some(build_ipv4(req.dst, req.src, PROTO_ICMP, 64, req.sequence, &icmp))
}
