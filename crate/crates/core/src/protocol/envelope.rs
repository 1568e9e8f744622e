use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// guard_id (16) + body_length (4) + function_type (2) + event_type (2).
pub const HEADER_LEN: usize = 24;
/// Runtime-to-guard header: the guard id is omitted.
pub const LOCAL_HEADER_LEN: usize = 8;
/// Largest body accepted from a stream.
pub const MAX_BODY_LEN: u32 = 16 << 20;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CodecError {
    #[error("truncated: need {need} bytes, have {have}")]
    Truncated { need: usize, have: usize },
    #[error("body_length says {declared} bytes but {actual} follow")]
    LengthMismatch { declared: u32, actual: usize },
    #[error("body of {0} bytes exceeds the limit")]
    TooLarge(u32),
}

macro_rules! id16 {
    ($name:ident, $doc:literal) => {
        #[doc = $doc]
        #[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
        pub struct $name(pub [u8; 16]);

        impl $name {
            pub fn to_hex(&self) -> String {
                hex::encode(self.0)
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(&self.to_hex())
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}({})", stringify!($name), self.to_hex())
            }
        }

        impl FromStr for $name {
            type Err = String;

            fn from_str(s: &str) -> Result<Self, Self::Err> {
                let bytes = hex::decode(s).map_err(|e| e.to_string())?;
                let arr: [u8; 16] = bytes
                    .try_into()
                    .map_err(|b: Vec<u8>| format!("expected 16 bytes, got {}", b.len()))?;
                Ok($name(arr))
            }
        }

        impl Serialize for $name {
            fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
                s.serialize_str(&self.to_hex())
            }
        }

        impl<'de> Deserialize<'de> for $name {
            fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
                let s = String::deserialize(d)?;
                s.parse().map_err(serde::de::Error::custom)
            }
        }
    };
}

id16!(GuardId, "16-byte guard identity assigned at registration.");
id16!(RequestId, "16-byte identity of one application execution.");

/// First 16 bytes of SHA-256 over `instance_id || 0x00 || function_name`.
pub fn derive_guard_id(instance_id: &str, function_name: &str) -> GuardId {
    let mut h = Sha256::new();
    h.update(instance_id.as_bytes());
    h.update([0u8]);
    h.update(function_name.as_bytes());
    let digest = h.finalize();
    let mut id = [0u8; 16];
    id.copy_from_slice(&digest[..16]);
    GuardId(id)
}

/// Security function an event belongs to.
pub mod function_type {
    pub const CORE: u16 = 0;
    pub const FLOW_TRACKING: u16 = 1;
    pub const CREDENTIAL: u16 = 2;
    pub const RATE_LIMIT: u16 = 3;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
#[repr(u16)]
pub enum EventType {
    Register = 1,
    RegisterAck = 2,
    FlowEvent = 3,
    DecisionReq = 4,
    DecisionResp = 5,
    Stop = 6,
    Resume = 7,
    Heartbeat = 8,
    HeartbeatAck = 9,
    PolicyPush = 10,
    PolicyAck = 11,
}

impl EventType {
    pub fn code(self) -> u16 {
        self as u16
    }
}

impl TryFrom<u16> for EventType {
    type Error = u16;

    fn try_from(v: u16) -> Result<Self, u16> {
        Ok(match v {
            1 => EventType::Register,
            2 => EventType::RegisterAck,
            3 => EventType::FlowEvent,
            4 => EventType::DecisionReq,
            5 => EventType::DecisionResp,
            6 => EventType::Stop,
            7 => EventType::Resume,
            8 => EventType::Heartbeat,
            9 => EventType::HeartbeatAck,
            10 => EventType::PolicyPush,
            11 => EventType::PolicyAck,
            other => return Err(other),
        })
    }
}

/// Guard/controller event. Integers are big-endian on the wire.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventEnvelope {
    pub guard_id: GuardId,
    pub function_type: u16,
    pub event_type: u16,
    pub body: Vec<u8>,
}

impl EventEnvelope {
    pub fn new(guard_id: GuardId, function_type: u16, event_type: EventType, body: Vec<u8>) -> Self {
        EventEnvelope { guard_id, function_type, event_type: event_type.code(), body }
    }

    pub fn kind(&self) -> Option<EventType> {
        EventType::try_from(self.event_type).ok()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + self.body.len());
        out.extend_from_slice(&self.guard_id.0);
        out.extend_from_slice(&(self.body.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.function_type.to_be_bytes());
        out.extend_from_slice(&self.event_type.to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    /// Decodes exactly one envelope occupying all of `bytes`.
    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < HEADER_LEN {
            return Err(CodecError::Truncated { need: HEADER_LEN, have: bytes.len() });
        }
        let header = Header::parse(&bytes[..HEADER_LEN]);
        let actual = bytes.len() - HEADER_LEN;
        if header.body_length as usize != actual {
            return Err(CodecError::LengthMismatch { declared: header.body_length, actual });
        }
        Ok(header.with_body(bytes[HEADER_LEN..].to_vec()))
    }

    /// Splits one envelope off the front of `buf`; `Ok(None)` when more
    /// bytes are needed.
    pub fn decode_prefix(buf: &[u8]) -> Result<Option<(Self, usize)>, CodecError> {
        if buf.len() < HEADER_LEN {
            return Ok(None);
        }
        let header = Header::parse(&buf[..HEADER_LEN]);
        if header.body_length > MAX_BODY_LEN {
            return Err(CodecError::TooLarge(header.body_length));
        }
        let total = HEADER_LEN + header.body_length as usize;
        if buf.len() < total {
            return Ok(None);
        }
        Ok(Some((header.with_body(buf[HEADER_LEN..total].to_vec()), total)))
    }

    /// Reads one envelope from a stream; `Ok(None)` on clean EOF.
    pub fn read_from(r: &mut impl Read) -> io::Result<Option<Self>> {
        let mut head = [0u8; HEADER_LEN];
        let mut got = 0;
        while got < HEADER_LEN {
            let n = r.read(&mut head[got..])?;
            if n == 0 {
                return if got == 0 {
                    Ok(None)
                } else {
                    Err(io::Error::new(io::ErrorKind::UnexpectedEof, "truncated envelope header"))
                };
            }
            got += n;
        }
        let header = Header::parse(&head);
        if header.body_length > MAX_BODY_LEN {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                CodecError::TooLarge(header.body_length),
            ));
        }
        let mut body = vec![0u8; header.body_length as usize];
        r.read_exact(&mut body)?;
        Ok(Some(header.with_body(body)))
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(&self.encode())?;
        w.flush()
    }
}

struct Header {
    guard_id: GuardId,
    body_length: u32,
    function_type: u16,
    event_type: u16,
}

impl Header {
    fn parse(b: &[u8]) -> Header {
        let mut guard_id = [0u8; 16];
        guard_id.copy_from_slice(&b[..16]);
        Header {
            guard_id: GuardId(guard_id),
            body_length: u32::from_be_bytes([b[16], b[17], b[18], b[19]]),
            function_type: u16::from_be_bytes([b[20], b[21]]),
            event_type: u16::from_be_bytes([b[22], b[23]]),
        }
    }

    fn with_body(self, body: Vec<u8>) -> EventEnvelope {
        EventEnvelope {
            guard_id: self.guard_id,
            function_type: self.function_type,
            event_type: self.event_type,
            body,
        }
    }
}

/// Runtime-to-guard event: the same layout without the guard id.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LocalEnvelope {
    pub function_type: u16,
    pub event_type: u16,
    pub body: Vec<u8>,
}

impl LocalEnvelope {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(LOCAL_HEADER_LEN + self.body.len());
        out.extend_from_slice(&(self.body.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.function_type.to_be_bytes());
        out.extend_from_slice(&self.event_type.to_be_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CodecError> {
        if bytes.len() < LOCAL_HEADER_LEN {
            return Err(CodecError::Truncated { need: LOCAL_HEADER_LEN, have: bytes.len() });
        }
        let declared = u32::from_be_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        let actual = bytes.len() - LOCAL_HEADER_LEN;
        if declared as usize != actual {
            return Err(CodecError::LengthMismatch { declared, actual });
        }
        Ok(LocalEnvelope {
            function_type: u16::from_be_bytes([bytes[4], bytes[5]]),
            event_type: u16::from_be_bytes([bytes[6], bytes[7]]),
            body: bytes[LOCAL_HEADER_LEN..].to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_body_layout() {
        let env = EventEnvelope { guard_id: GuardId([0; 16]), function_type: 1, event_type: 2, body: vec![] };
        let mut want = vec![0u8; 16];
        want.extend_from_slice(&[0, 0, 0, 0, 0, 1, 0, 2]);
        assert_eq!(env.encode(), want);
        assert_eq!(env.encode().len(), 24);
        assert_eq!(EventEnvelope::decode(&want).unwrap(), env);
    }

    #[test]
    fn body_length_field() {
        let env = EventEnvelope { guard_id: GuardId([7; 16]), function_type: 0, event_type: 3, body: b"hi".to_vec() };
        let bytes = env.encode();
        assert_eq!(bytes.len(), 26);
        assert_eq!(&bytes[16..20], &[0, 0, 0, 2]);
    }

    #[test]
    fn short_input_truncated() {
        assert_eq!(
            EventEnvelope::decode(&[0u8; 21]),
            Err(CodecError::Truncated { need: 24, have: 21 })
        );
    }

    #[test]
    fn length_mismatch() {
        let mut bytes = EventEnvelope::new(GuardId::default(), 0, EventType::Heartbeat, b"abc".to_vec()).encode();
        bytes.pop();
        assert!(matches!(EventEnvelope::decode(&bytes), Err(CodecError::LengthMismatch { declared: 3, actual: 2 })));
    }

    #[test]
    fn prefix_framing() {
        let a = EventEnvelope::new(GuardId([1; 16]), 1, EventType::FlowEvent, b"one".to_vec());
        let b = EventEnvelope::new(GuardId([2; 16]), 2, EventType::Stop, b"three".to_vec());
        let mut buf = a.encode();
        buf.extend(b.encode());
        let (first, used) = EventEnvelope::decode_prefix(&buf).unwrap().unwrap();
        assert_eq!(first, a);
        let (second, used2) = EventEnvelope::decode_prefix(&buf[used..]).unwrap().unwrap();
        assert_eq!(second, b);
        assert_eq!(used + used2, buf.len());
        assert_eq!(EventEnvelope::decode_prefix(&buf[..26]).unwrap(), None);
        assert_eq!(EventEnvelope::decode_prefix(&buf[..23]).unwrap(), None);
    }

    #[test]
    fn stream_roundtrip() {
        let a = EventEnvelope::new(GuardId([9; 16]), 3, EventType::Resume, b"{}".to_vec());
        let mut buf = Vec::new();
        a.write_to(&mut buf).unwrap();
        let mut r = &buf[..];
        assert_eq!(EventEnvelope::read_from(&mut r).unwrap(), Some(a));
        assert_eq!(EventEnvelope::read_from(&mut r).unwrap(), None);
    }

    #[test]
    fn local_variant_omits_guard_id() {
        let l = LocalEnvelope { function_type: 1, event_type: 3, body: b"x".to_vec() };
        let bytes = l.encode();
        assert_eq!(bytes, [0, 0, 0, 1, 0, 1, 0, 3, b'x']);
        assert_eq!(LocalEnvelope::decode(&bytes).unwrap(), l);
        assert!(LocalEnvelope::decode(&bytes[..7]).is_err());
    }

    #[test]
    fn guard_id_is_deterministic_and_distinct() {
        assert_eq!(derive_guard_id("i-1", "fnA"), derive_guard_id("i-1", "fnA"));
        assert_ne!(derive_guard_id("i-1", "fnA"), derive_guard_id("i-1", "fnB"));
        // Separator keeps ("ab","c") and ("a","bc") apart.
        assert_ne!(derive_guard_id("ab", "c"), derive_guard_id("a", "bc"));
    }

    #[test]
    fn id_hex_roundtrip() {
        let id = GuardId([0xab; 16]);
        assert_eq!(id.to_hex().parse::<GuardId>().unwrap(), id);
        assert!("abcd".parse::<GuardId>().is_err());
    }
}
