//! Frame codec.
//!
//! ```text
//! "GM" | version u8 | msg_type u8 | run_id [16] | len u32 BE | payload | crc32 u32 BE
//! ```
//!
//! The checksum is CRC-32/IEEE over the payload only. Payloads are
//! canonical JSON: sorted keys, no whitespace, shortest round-trip floats.

use std::fmt;
use std::str::FromStr;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

pub const MAGIC: [u8; 2] = *b"GM";
pub const VERSION: u8 = 0x01;
pub const HEADER_LEN: usize = 24;
pub const TRAILER_LEN: usize = 4;
pub const MAX_PAYLOAD: usize = 16 * 1024 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireError {
    #[error("framing error: {0}")]
    Framing(String),
    #[error("payload checksum mismatch: frame says {expected:#010x}, payload hashes to {actual:#010x}")]
    Corruption { expected: u32, actual: u32 },
    #[error("incomplete frame: need {needed} more bytes")]
    Incomplete { needed: usize },
    #[error("unsupported protocol version {0:#04x}")]
    Version(u8),
    #[error("unknown message type {0:#04x}")]
    UnknownType(u8),
    #[error("payload of {0} bytes exceeds the 16 MiB limit")]
    TooLarge(usize),
    #[error("payload is not valid for its message type: {0}")]
    Payload(String),
}

impl WireError {
    /// Only a short read is worth retrying once more bytes arrive.
    pub fn is_retryable(&self) -> bool {
        matches!(self, Self::Incomplete { .. })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
#[repr(u8)]
pub enum MsgType {
    Hello = 0x01,
    TopologyReport = 0x02,
    ForecastReport = 0x03,
    Ack = 0x04,
    PartialReady = 0x05,
    ScenarioReady = 0x06,
    RunResult = 0x07,
    ErrorMsg = 0x08,
    RunOpen = 0x09,
    RunClose = 0x0A,
}

impl MsgType {
    pub const ALL: [MsgType; 10] = [
        Self::Hello,
        Self::TopologyReport,
        Self::ForecastReport,
        Self::Ack,
        Self::PartialReady,
        Self::ScenarioReady,
        Self::RunResult,
        Self::ErrorMsg,
        Self::RunOpen,
        Self::RunClose,
    ];
}

impl TryFrom<u8> for MsgType {
    type Error = WireError;

    fn try_from(b: u8) -> Result<Self, WireError> {
        Self::ALL
            .into_iter()
            .find(|t| *t as u8 == b)
            .ok_or(WireError::UnknownType(b))
    }
}

/// 128-bit run identifier, written as 32 lowercase hex digits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct RunId(pub [u8; 16]);

impl RunId {
    pub const NIL: RunId = RunId([0; 16]);

    /// Deterministic id derived from a seed.
    pub fn from_seed(seed: u64) -> Self {
        let mut b = [0u8; 16];
        b[..8].copy_from_slice(b"edgegrid");
        b[8..].copy_from_slice(&seed.to_be_bytes());
        RunId(b)
    }
}

impl fmt::Display for RunId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl FromStr for RunId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let bytes = hex::decode(s).map_err(|e| format!("run id `{s}`: {e}"))?;
        let arr: [u8; 16] = bytes
            .try_into()
            .map_err(|_| format!("run id `{s}` must be 32 hex digits"))?;
        Ok(RunId(arr))
    }
}

impl Serialize for RunId {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RunId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Envelope {
    pub version: u8,
    pub msg_type: MsgType,
    pub run_id: RunId,
    pub payload: Vec<u8>,
}

impl Envelope {
    pub fn new(msg_type: MsgType, run_id: RunId, payload: Vec<u8>) -> Self {
        Self {
            version: VERSION,
            msg_type,
            run_id,
            payload,
        }
    }

    pub fn frame_len(&self) -> usize {
        HEADER_LEN + self.payload.len() + TRAILER_LEN
    }
}

pub fn encode(env: &Envelope) -> Result<Vec<u8>, WireError> {
    if env.payload.len() > MAX_PAYLOAD {
        return Err(WireError::TooLarge(env.payload.len()));
    }
    if env.version != VERSION {
        return Err(WireError::Version(env.version));
    }
    let mut out = Vec::with_capacity(env.frame_len());
    out.extend_from_slice(&MAGIC);
    out.push(env.version);
    out.push(env.msg_type as u8);
    out.extend_from_slice(&env.run_id.0);
    out.extend_from_slice(&(env.payload.len() as u32).to_be_bytes());
    out.extend_from_slice(&env.payload);
    out.extend_from_slice(&crc32fast::hash(&env.payload).to_be_bytes());
    Ok(out)
}

/// Decodes the frame at the start of `buf`, returning it and the number of
/// bytes it occupied.
pub fn decode_prefix(buf: &[u8]) -> Result<(Envelope, usize), WireError> {
    let magic_seen = buf.len().min(2);
    if buf[..magic_seen] != MAGIC[..magic_seen] {
        return Err(WireError::Framing(format!("bad magic {:02x?}", &buf[..magic_seen])));
    }
    if buf.len() < 3 {
        return Err(WireError::Incomplete {
            needed: HEADER_LEN - buf.len(),
        });
    }
    if buf[2] != VERSION {
        return Err(WireError::Version(buf[2]));
    }
    if buf.len() < HEADER_LEN {
        return Err(WireError::Incomplete {
            needed: HEADER_LEN - buf.len(),
        });
    }
    let len = u32::from_be_bytes(buf[20..24].try_into().expect("4 bytes")) as usize;
    if len > MAX_PAYLOAD {
        return Err(WireError::TooLarge(len));
    }
    let total = HEADER_LEN + len + TRAILER_LEN;
    if buf.len() < total {
        return Err(WireError::Incomplete {
            needed: total - buf.len(),
        });
    }
    let payload = &buf[HEADER_LEN..HEADER_LEN + len];
    let expected = u32::from_be_bytes(buf[HEADER_LEN + len..total].try_into().expect("4 bytes"));
    let actual = crc32fast::hash(payload);
    if expected != actual {
        return Err(WireError::Corruption { expected, actual });
    }
    let msg_type = MsgType::try_from(buf[3])?;
    let run_id = RunId(buf[4..20].try_into().expect("16 bytes"));
    Ok((Envelope::new(msg_type, run_id, payload.to_vec()), total))
}

/// Decodes exactly one frame; trailing bytes are a framing error.
pub fn decode(buf: &[u8]) -> Result<Envelope, WireError> {
    let (env, used) = decode_prefix(buf)?;
    if used != buf.len() {
        return Err(WireError::Framing(format!(
            "{} trailing bytes after frame",
            buf.len() - used
        )));
    }
    Ok(env)
}

/// Incremental decoder for a byte stream. After a non-retryable error the
/// stream is out of sync and the decoder should be discarded.
#[derive(Debug, Default)]
pub struct FrameDecoder {
    buf: Vec<u8>,
}

impl FrameDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, bytes: &[u8]) {
        self.buf.extend_from_slice(bytes);
    }

    pub fn buffered(&self) -> usize {
        self.buf.len()
    }

    pub fn next_frame(&mut self) -> Result<Option<Envelope>, WireError> {
        if self.buf.is_empty() {
            return Ok(None);
        }
        match decode_prefix(&self.buf) {
            Ok((env, used)) => {
                self.buf.drain(..used);
                Ok(Some(env))
            }
            Err(e) if e.is_retryable() => Ok(None),
            Err(e) => Err(e),
        }
    }
}

/// Canonical JSON encoding of any serializable value.
pub fn to_payload<T: Serialize>(value: &T) -> Vec<u8> {
    // Value's map is a BTreeMap, so re-serializing through it sorts keys.
    let v = serde_json::to_value(value).expect("message types serialize to JSON");
    serde_json::to_vec(&v).expect("JSON values serialize")
}

pub fn from_payload<T: DeserializeOwned>(payload: &[u8]) -> Result<T, WireError> {
    serde_json::from_slice(payload).map_err(|e| WireError::Payload(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golden_ack() -> Vec<u8> {
        hex::decode(include_str!("../fixtures/ack_empty.hex").trim()).unwrap()
    }

    fn ack_env() -> Envelope {
        let mut id = [0u8; 16];
        for (i, b) in id.iter_mut().enumerate() {
            *b = i as u8;
        }
        Envelope::new(MsgType::Ack, RunId(id), b"{}".to_vec())
    }

    #[test]
    fn golden_ack_both_ways() {
        assert_eq!(encode(&ack_env()).unwrap(), golden_ack());
        assert_eq!(decode(&golden_ack()).unwrap(), ack_env());
    }

    #[test]
    fn flipped_crc_is_corruption() {
        let mut b = golden_ack();
        *b.last_mut().unwrap() ^= 0x01;
        assert!(matches!(decode(&b), Err(WireError::Corruption { .. })));
    }

    #[test]
    fn classified_errors() {
        let b = golden_ack();
        assert!(matches!(decode(&b[..10]), Err(WireError::Incomplete { .. })));
        assert!(matches!(decode(b"XM\x01"), Err(WireError::Framing(_))));
        let mut v = b.clone();
        v[2] = 2;
        assert_eq!(decode(&v), Err(WireError::Version(2)));
        let mut t = b.clone();
        t[3] = 0x0B;
        assert_eq!(decode(&t), Err(WireError::UnknownType(0x0B)));
        let mut long = b.clone();
        long.push(0);
        assert!(matches!(decode(&long), Err(WireError::Framing(_))));
        assert!(matches!(decode(&[]), Err(WireError::Incomplete { .. })));
    }

    #[test]
    fn payload_limit() {
        let mut env = ack_env();
        env.payload = vec![b' '; MAX_PAYLOAD + 1];
        assert_eq!(encode(&env), Err(WireError::TooLarge(MAX_PAYLOAD + 1)));
        env.payload.pop();
        assert_eq!(encode(&env).unwrap().len(), MAX_PAYLOAD + HEADER_LEN + TRAILER_LEN);
        let mut hdr = encode(&ack_env()).unwrap();
        hdr[20..24].copy_from_slice(&((MAX_PAYLOAD + 1) as u32).to_be_bytes());
        assert_eq!(decode(&hdr), Err(WireError::TooLarge(MAX_PAYLOAD + 1)));
    }

    #[test]
    fn canonical_json_sorts_and_compacts() {
        #[derive(Serialize)]
        struct S {
            zeta: f64,
            alpha: Vec<u32>,
            mid: &'static str,
        }
        let p = to_payload(&S {
            zeta: 0.1,
            alpha: vec![1, 2],
            mid: "x",
        });
        assert_eq!(p, br#"{"alpha":[1,2],"mid":"x","zeta":0.1}"#);
    }

    #[test]
    fn run_id_hex_roundtrip() {
        let id = RunId::from_seed(42);
        assert_eq!(id.to_string().parse::<RunId>().unwrap(), id);
        assert!("abc".parse::<RunId>().is_err());
    }
}
