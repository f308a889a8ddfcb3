use std::net::Ipv4Addr;

use thiserror::Error;

use super::checksum::internet_checksum;

pub const PROTO_ICMP: u8 = 1;
pub const PROTO_TCP: u8 = 6;
pub const PROTO_UDP: u8 = 17;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("malformed IPv4 packet: {0}")]
pub struct Malformed(pub &'static str);

/// Decoded fixed part of an IPv4 header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Ipv4Head {
    /// Header length in 32-bit words.
    pub ihl: u8,
    pub total_length: u16,
    pub identification: u16,
    pub ttl: u8,
    pub protocol: u8,
    pub header_checksum: u16,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
}

impl Ipv4Head {
    pub fn header_len(&self) -> usize {
        usize::from(self.ihl) * 4
    }

    /// Byte range of the payload inside the packet the head was parsed from.
    pub fn payload_range(&self) -> std::ops::Range<usize> {
        self.header_len()..usize::from(self.total_length)
    }
}

pub fn parse_ipv4(bytes: &[u8]) -> Result<Ipv4Head, Malformed> {
    if let Some(first) = bytes.first() {
        if first >> 4 != 4 {
            return Err(Malformed("version"));
        }
    }
    if bytes.len() < 20 {
        return Err(Malformed("truncated"));
    }
    let ihl = bytes[0] & 0x0f;
    if ihl < 5 {
        return Err(Malformed("ihl"));
    }
    let hlen = usize::from(ihl) * 4;
    if bytes.len() < hlen {
        return Err(Malformed("truncated"));
    }
    let total_length = u16::from_be_bytes([bytes[2], bytes[3]]);
    if usize::from(total_length) < hlen {
        return Err(Malformed("total length"));
    }
    if bytes.len() < usize::from(total_length) {
        return Err(Malformed("truncated"));
    }
    if internet_checksum(&bytes[..hlen]) != 0 {
        return Err(Malformed("checksum"));
    }
    let flags_frag = u16::from_be_bytes([bytes[6], bytes[7]]);
    let more_fragments = flags_frag & 0x2000 != 0;
    if more_fragments || flags_frag & 0x1fff != 0 {
        return Err(Malformed("fragment"));
    }
    Ok(Ipv4Head {
        ihl,
        total_length,
        identification: u16::from_be_bytes([bytes[4], bytes[5]]),
        ttl: bytes[8],
        protocol: bytes[9],
        header_checksum: u16::from_be_bytes([bytes[10], bytes[11]]),
        src: Ipv4Addr::new(bytes[12], bytes[13], bytes[14], bytes[15]),
        dst: Ipv4Addr::new(bytes[16], bytes[17], bytes[18], bytes[19]),
    })
}

/// Builds a 20-byte-header IPv4 packet (DF set) with a valid checksum.
pub fn build_ipv4(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, ttl: u8, identification: u16, payload: &[u8]) -> Vec<u8> {
    let total = 20 + payload.len();
    assert!(total <= usize::from(u16::MAX), "IPv4 packet too large");
    let mut p = Vec::with_capacity(total);
    p.push(0x45);
    p.push(0);
    p.extend_from_slice(&(total as u16).to_be_bytes());
    p.extend_from_slice(&identification.to_be_bytes());
    p.extend_from_slice(&0x4000u16.to_be_bytes());
    p.push(ttl);
    p.push(protocol);
    p.extend_from_slice(&[0, 0]);
    p.extend_from_slice(&src.octets());
    p.extend_from_slice(&dst.octets());
    let csum = internet_checksum(&p[..20]);
    p[10..12].copy_from_slice(&csum.to_be_bytes());
    p.extend_from_slice(payload);
    p
}

/// IP-in-UDP framing: the UDP payload is exactly the IP packet.
pub fn encapsulate(packet: &[u8]) -> Result<Vec<u8>, Malformed> {
    let head = parse_ipv4(packet)?;
    Ok(packet[..usize::from(head.total_length)].to_vec())
}

/// Inverse of [`encapsulate`]; re-validates the carried packet.
pub fn decapsulate(payload: &[u8]) -> Result<Vec<u8>, Malformed> {
    let head = parse_ipv4(payload)?;
    Ok(payload[..usize::from(head.total_length)].to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Vec<u8> {
        let mut h = vec![
            0x45, 0x00, 0x00, 0x3c, 0x1c, 0x46, 0x40, 0x00, 0x40, 0x06, 0x00, 0x00, 0xac, 0x10, 0x0a, 0x63, 0xac,
            0x10, 0x0a, 0x0c,
        ];
        // 0xb1e6 computed by the straight-loop oracle in checksum.rs
        h[10..12].copy_from_slice(&[0xb1, 0xe6]);
        h.resize(0x3c, 0);
        h
    }

    #[test]
    fn parses_sample_header() {
        let head = parse_ipv4(&sample()).unwrap();
        assert_eq!(head.protocol, PROTO_TCP);
        assert_eq!(head.ihl, 5);
        assert_eq!(head.total_length, 60);
        assert_eq!(head.src, Ipv4Addr::new(172, 16, 10, 99));
        assert_eq!(head.dst, Ipv4Addr::new(172, 16, 10, 12));
        assert_eq!(head.header_checksum, 0xb1e6);
        assert_eq!(head.payload_range(), 20..60);
    }

    #[test]
    fn rejects_wrong_version() {
        let mut p = sample();
        p[0] = 0x60;
        assert_eq!(parse_ipv4(&p), Err(Malformed("version")));
    }

    #[test]
    fn rejects_truncation() {
        assert_eq!(parse_ipv4(&sample()[..19]), Err(Malformed("truncated")));
        assert_eq!(parse_ipv4(&sample()[..40]), Err(Malformed("truncated")));
    }

    #[test]
    fn rejects_bad_checksum() {
        let mut p = sample();
        p[15] ^= 1;
        assert_eq!(parse_ipv4(&p), Err(Malformed("checksum")));
    }

    #[test]
    fn rejects_fragments() {
        let mut p = build_ipv4(Ipv4Addr::LOCALHOST, Ipv4Addr::LOCALHOST, PROTO_UDP, 64, 1, b"x");
        p[6] = 0x20;
        p[10..12].copy_from_slice(&[0, 0]);
        let c = internet_checksum(&p[..20]);
        p[10..12].copy_from_slice(&c.to_be_bytes());
        assert_eq!(parse_ipv4(&p), Err(Malformed("fragment")));
    }

    #[test]
    fn framing_is_identity() {
        let p = build_ipv4(Ipv4Addr::new(10, 8, 0, 2), Ipv4Addr::new(10, 0, 0, 1), PROTO_UDP, 64, 9, &[7u8; 1480]);
        assert_eq!(p.len(), 1500);
        let payload = encapsulate(&p).unwrap();
        assert_eq!(payload.len(), 1500);
        assert_eq!(decapsulate(&payload).unwrap(), p);
    }

    #[test]
    fn decapsulating_garbage_fails() {
        assert!(decapsulate(b"definitely not a packet").is_err());
        assert!(decapsulate(&[]).is_err());
    }
}
