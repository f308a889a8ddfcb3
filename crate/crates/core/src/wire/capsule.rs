use bytes::{Buf, Bytes, BytesMut};
use thiserror::Error;

/// Largest datagram a capsule can carry: the width of the length prefix.
pub const MAX_CAPSULE_PAYLOAD: usize = u16::MAX as usize;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CapsuleError {
    #[error("datagram of {0} bytes exceeds the 65535-byte capsule limit")]
    Oversize(usize),
}

/// Frames one datagram: a 2-byte big-endian length followed by the payload.
pub fn encode_capsule(payload: &[u8]) -> Result<Vec<u8>, CapsuleError> {
    if payload.len() > MAX_CAPSULE_PAYLOAD {
        return Err(CapsuleError::Oversize(payload.len()));
    }
    let mut out = Vec::with_capacity(2 + payload.len());
    out.extend_from_slice(&(payload.len() as u16).to_be_bytes());
    out.extend_from_slice(payload);
    Ok(out)
}

/// Decodes every complete capsule at the front of `buf` and returns them
/// together with the unconsumed tail.
pub fn decode_capsules(buf: &[u8]) -> (Vec<Vec<u8>>, &[u8]) {
    let mut out = Vec::new();
    let mut rest = buf;
    while rest.len() >= 2 {
        let len = u16::from_be_bytes([rest[0], rest[1]]) as usize;
        if rest.len() < 2 + len {
            break;
        }
        out.push(rest[2..2 + len].to_vec());
        rest = &rest[2 + len..];
    }
    (out, rest)
}

/// Incremental decoder over a growing stream buffer.
#[derive(Debug, Default)]
pub struct CapsuleDecoder {
    buf: BytesMut,
}

impl CapsuleDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_initial(bytes: &[u8]) -> Self {
        Self { buf: BytesMut::from(bytes) }
    }

    pub fn buffer_mut(&mut self) -> &mut BytesMut {
        &mut self.buf
    }

    pub fn extend(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    /// Pops the next complete datagram, if buffered.
    pub fn next_datagram(&mut self) -> Option<Bytes> {
        if self.buf.len() < 2 {
            return None;
        }
        let len = u16::from_be_bytes([self.buf[0], self.buf[1]]) as usize;
        if self.buf.len() < 2 + len {
            return None;
        }
        self.buf.advance(2);
        Some(self.buf.split_to(len).freeze())
    }

    pub fn pending(&self) -> usize {
        self.buf.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn encodes_length_prefix() {
        assert_eq!(encode_capsule(b"abc").unwrap(), [0x00, 0x03, 0x61, 0x62, 0x63]);
        assert_eq!(encode_capsule(b"").unwrap(), [0x00, 0x00]);
    }

    #[test]
    fn rejects_oversize() {
        let big = vec![0u8; MAX_CAPSULE_PAYLOAD + 1];
        assert_eq!(encode_capsule(&big), Err(CapsuleError::Oversize(MAX_CAPSULE_PAYLOAD + 1)));
        assert_eq!(encode_capsule(&big[..MAX_CAPSULE_PAYLOAD]).unwrap().len(), MAX_CAPSULE_PAYLOAD + 2);
    }

    #[test]
    fn stray_byte_is_remainder() {
        let mut buf = encode_capsule(b"abc").unwrap();
        buf.push(0x07);
        let (caps, rest) = decode_capsules(&buf);
        assert_eq!(caps, vec![b"abc".to_vec()]);
        assert_eq!(rest, &[0x07]);
    }

    #[test]
    fn incremental_decoder_matches_batch() {
        let mut stream = Vec::new();
        for p in [&b"a"[..], b"", b"hello"] {
            stream.extend(encode_capsule(p).unwrap());
        }
        let mut dec = CapsuleDecoder::new();
        let mut got = Vec::new();
        for b in &stream {
            dec.extend(&[*b]);
            while let Some(d) = dec.next_datagram() {
                got.push(d.to_vec());
            }
        }
        assert_eq!(got, decode_capsules(&stream).0);
        assert_eq!(dec.pending(), 0);
    }
}
