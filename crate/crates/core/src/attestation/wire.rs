//! Length-prefixed JSON framing for attestation messages.
//!
//! A frame is a 4-byte big-endian body length followed by a UTF-8 JSON
//! object whose `type` field is `attest_request` or `attest_report`.
//! Decoding is strict: unknown or duplicate fields, uppercase hex and
//! non-canonical MACs are all rejected.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::Mac;

use super::{
    AttestationReport, AttestationRequest, Challenge, DeviceState, Divergence, DivergenceKind,
};

pub const MAX_FRAME_LEN: usize = 1 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("frame of {0} bytes exceeds the limit")]
    FrameTooLarge(usize),
    #[error("truncated frame: need {needed} bytes, have {available}")]
    Truncated { needed: usize, available: usize },
    #[error("{0} trailing bytes after frame")]
    TrailingBytes(usize),
    #[error("malformed message: {0}")]
    BadJson(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Request(AttestationRequest),
    Report(AttestationReport),
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestBody {
    #[serde(rename = "type")]
    kind: String,
    challenge: String,
    mac: String,
    issued_at: u64,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DivergenceBody {
    path: String,
    kind: DivergenceKind,
    observed_digest: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ReportBody {
    #[serde(rename = "type")]
    kind: String,
    challenge: String,
    mac: String,
    verdict: DeviceState,
    divergences: Vec<DivergenceBody>,
    signature: String,
}

#[derive(Deserialize)]
struct TypeOnly {
    #[serde(rename = "type")]
    kind: String,
}

const REQUEST_TYPE: &str = "attest_request";
const REPORT_TYPE: &str = "attest_report";

fn bad(msg: impl Into<String>) -> WireError {
    WireError::BadJson(msg.into())
}

fn strict_hex<const N: usize>(s: &str, what: &str) -> Result<[u8; N], WireError> {
    if s.len() != 2 * N || !s.bytes().all(|b| matches!(b, b'0'..=b'9' | b'a'..=b'f')) {
        return Err(bad(format!(
            "{what} must be {} lowercase hex digits",
            2 * N
        )));
    }
    let bytes = hex::decode(s).map_err(|e| bad(e.to_string()))?;
    Ok(bytes.try_into().expect("length checked"))
}

fn strict_mac(s: &str) -> Result<Mac, WireError> {
    let mac: Mac = s.parse().map_err(|_| bad(format!("bad mac {s:?}")))?;
    if mac.to_string() != s {
        return Err(bad(format!("mac {s:?} is not canonical")));
    }
    Ok(mac)
}

/// Serializes the JSON body (no length prefix).
pub fn encode_body(msg: &Message) -> Vec<u8> {
    let json = match msg {
        Message::Request(r) => serde_json::to_vec(&RequestBody {
            kind: REQUEST_TYPE.into(),
            challenge: r.challenge.to_string(),
            mac: r.device_mac.to_string(),
            issued_at: r.issued_at,
        }),
        Message::Report(r) => serde_json::to_vec(&ReportBody {
            kind: REPORT_TYPE.into(),
            challenge: r.challenge.to_string(),
            mac: r.device_mac.to_string(),
            verdict: r.verdict,
            divergences: r
                .divergences
                .iter()
                .map(|d| DivergenceBody {
                    path: d.path.clone(),
                    kind: d.kind,
                    observed_digest: d.observed_digest.map(hex::encode).unwrap_or_default(),
                })
                .collect(),
            signature: hex::encode(&r.signature),
        }),
    };
    json.expect("message serializes")
}

pub fn decode_body(body: &[u8]) -> Result<Message, WireError> {
    let head: TypeOnly = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
    match head.kind.as_str() {
        REQUEST_TYPE => {
            let r: RequestBody = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
            Ok(Message::Request(AttestationRequest {
                challenge: Challenge(strict_hex::<32>(&r.challenge, "challenge")?),
                device_mac: strict_mac(&r.mac)?,
                issued_at: r.issued_at,
            }))
        }
        REPORT_TYPE => {
            let r: ReportBody = serde_json::from_slice(body).map_err(|e| bad(e.to_string()))?;
            let divergences = r
                .divergences
                .into_iter()
                .map(|d| {
                    let observed_digest = if d.observed_digest.is_empty() {
                        None
                    } else {
                        Some(strict_hex::<32>(&d.observed_digest, "observed_digest")?)
                    };
                    Ok(Divergence {
                        path: d.path,
                        kind: d.kind,
                        observed_digest,
                    })
                })
                .collect::<Result<Vec<_>, WireError>>()?;
            Ok(Message::Report(AttestationReport {
                challenge: Challenge(strict_hex::<32>(&r.challenge, "challenge")?),
                device_mac: strict_mac(&r.mac)?,
                verdict: r.verdict,
                divergences,
                signature: strict_hex::<64>(&r.signature, "signature")?.to_vec(),
            }))
        }
        other => Err(WireError::UnknownType(other.to_string())),
    }
}

/// Full frame: length prefix plus body.
pub fn encode_message(msg: &Message) -> Vec<u8> {
    let body = encode_body(msg);
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    out
}

/// Decodes exactly one frame occupying the whole buffer.
pub fn decode_message(buf: &[u8]) -> Result<Message, WireError> {
    if buf.len() < 4 {
        return Err(WireError::Truncated {
            needed: 4,
            available: buf.len(),
        });
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let rest = &buf[4..];
    if rest.len() < len {
        return Err(WireError::Truncated {
            needed: len,
            available: rest.len(),
        });
    }
    if rest.len() > len {
        return Err(WireError::TrailingBytes(rest.len() - len));
    }
    decode_body(rest)
}

/// Reads one frame body. `Ok(None)` on clean end of stream before a prefix.
pub fn read_frame<R: Read>(r: &mut R) -> Result<Option<Vec<u8>>, WireError> {
    let mut prefix = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match r.read(&mut prefix[got..])? {
            0 if got == 0 => return Ok(None),
            0 => {
                return Err(WireError::Truncated {
                    needed: 4,
                    available: got,
                })
            }
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(prefix) as usize;
    if len > MAX_FRAME_LEN {
        return Err(WireError::FrameTooLarge(len));
    }
    let mut body = vec![0u8; len];
    r.read_exact(&mut body).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => WireError::Truncated {
            needed: len,
            available: 0,
        },
        _ => WireError::Io(e),
    })?;
    Ok(Some(body))
}

pub fn read_message<R: Read>(r: &mut R) -> Result<Option<Message>, WireError> {
    match read_frame(r)? {
        Some(body) => decode_body(&body).map(Some),
        None => Ok(None),
    }
}

pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<(), WireError> {
    w.write_all(&encode_message(msg))?;
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attestation::{attest, DeviceKey, ProcessTable, ReferenceMeasurement};

    fn request() -> AttestationRequest {
        AttestationRequest {
            challenge: Challenge([0xab; 32]),
            device_mac: "b8:27:eb:01:02:03".parse().unwrap(),
            issued_at: 1_700_000_000_000_000,
        }
    }

    fn infected_report() -> AttestationReport {
        let mut t = ProcessTable::new();
        t.insert("/bin/a", b"a".to_vec()).unwrap();
        let reference = ReferenceMeasurement::from_table(&t);
        t.insert("/tmp/bot", b"bot".to_vec()).unwrap();
        t.remove("/bin/a");
        attest(&t, &reference, &request(), &DeviceKey::from_seed([1; 32]))
    }

    #[test]
    fn request_layout() {
        let body = String::from_utf8(encode_body(&Message::Request(request()))).unwrap();
        assert_eq!(
            body,
            format!(
                r#"{{"type":"attest_request","challenge":"{}","mac":"b8:27:eb:01:02:03","issued_at":1700000000000000}}"#,
                "ab".repeat(32)
            )
        );
        let frame = encode_message(&Message::Request(request()));
        assert_eq!(&frame[..4], &(body.len() as u32).to_be_bytes());
    }

    #[test]
    fn round_trips() {
        for msg in [
            Message::Request(request()),
            Message::Report(infected_report()),
        ] {
            let frame = encode_message(&msg);
            assert_eq!(decode_message(&frame).unwrap(), msg);
            let mut cursor = std::io::Cursor::new(frame);
            assert_eq!(read_message(&mut cursor).unwrap(), Some(msg));
            assert!(read_message(&mut cursor).unwrap().is_none());
        }
    }

    #[test]
    fn framing_errors() {
        assert!(matches!(
            decode_message(&[0, 0]),
            Err(WireError::Truncated { .. })
        ));
        let huge = ((MAX_FRAME_LEN + 1) as u32).to_be_bytes();
        assert!(matches!(
            decode_message(&huge),
            Err(WireError::FrameTooLarge(_))
        ));
        let mut frame = encode_message(&Message::Request(request()));
        frame.push(b' ');
        assert!(matches!(
            decode_message(&frame),
            Err(WireError::TrailingBytes(1))
        ));
        frame.truncate(frame.len() - 5);
        assert!(matches!(
            decode_message(&frame),
            Err(WireError::Truncated { .. })
        ));
    }

    #[test]
    fn strictness() {
        let unknown = br#"{"type":"hello"}"#;
        assert!(matches!(decode_body(unknown), Err(WireError::UnknownType(t)) if t == "hello"));
        let upper = format!(
            r#"{{"type":"attest_request","challenge":"{}","mac":"b8:27:eb:01:02:03","issued_at":1}}"#,
            "AB".repeat(32)
        );
        assert!(matches!(
            decode_body(upper.as_bytes()),
            Err(WireError::BadJson(_))
        ));
        let upper_mac = format!(
            r#"{{"type":"attest_request","challenge":"{}","mac":"B8:27:EB:01:02:03","issued_at":1}}"#,
            "ab".repeat(32)
        );
        assert!(decode_body(upper_mac.as_bytes()).is_err());
        let extra = format!(
            r#"{{"type":"attest_request","challenge":"{}","mac":"b8:27:eb:01:02:03","issued_at":1,"x":0}}"#,
            "ab".repeat(32)
        );
        assert!(decode_body(extra.as_bytes()).is_err());
        assert!(decode_body(b"not json").is_err());
    }
}
