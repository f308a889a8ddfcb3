//! Byte-level codecs: HTTP/1.1-subset message heads, length-prefixed
//! datagram capsules, and the line-delimited control protocol.
//!
//! Everything here is a pure function over byte slices; callers own their
//! buffers.

mod capsule;
mod control;
mod head;

pub use capsule::{decode_capsules, encode_capsule, CapsuleDecoder, CapsuleError, MAX_CAPSULE_PAYLOAD};
pub use control::{decode_control, encode_control, ControlError, ControlMsg};
pub use head::{
    parse_message_head, reason_phrase, serialize_message_head, HeadError, HeaderList, MessageHead, StartLine,
    MAX_HEAD_LEN,
};
