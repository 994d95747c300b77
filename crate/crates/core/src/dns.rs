//! DNS response parsing (RFC 1035 wire format) for learning IP to hostname
//! mappings. Only the first question name and IN/A answers are kept.

use std::collections::HashSet;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

const HEADER_LEN: usize = 12;
const MAX_LABEL_LEN: usize = 63;
const MAX_NAME_LEN: usize = 255;

pub const TYPE_A: u16 = 1;
pub const TYPE_CNAME: u16 = 5;
pub const CLASS_IN: u16 = 1;

const ENCODED_TTL: u32 = 300;

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DnsAnswer {
    pub name: String,
    pub record_type: u16,
    pub ip: Ipv4Addr,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DnsResponse {
    pub txn_id: u16,
    pub is_response: bool,
    /// Lowercase, dot-separated, no trailing dot.
    pub query_name: String,
    pub answers: Vec<DnsAnswer>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DnsError {
    /// QR bit clear: a query, not a failure.
    #[error("message is a query, not a response")]
    NotAResponse,
    #[error("malformed DNS message: {0}")]
    Malformed(String),
}

fn malformed<T>(msg: impl Into<String>) -> Result<T, DnsError> {
    Err(DnsError::Malformed(msg.into()))
}

fn read_u16(msg: &[u8], at: usize) -> Result<u16, DnsError> {
    match msg.get(at..at + 2) {
        Some(b) => Ok(u16::from_be_bytes([b[0], b[1]])),
        None => malformed(format!("truncated at offset {at}")),
    }
}

/// Reads a possibly-compressed name starting at `start`. Returns the
/// lowercased name and the offset just past it in the uncompressed stream.
///
/// Every pointer target is recorded; revisiting one is a cycle. Since each
/// offset is visited at most once, the loop runs at most `msg.len()` times.
pub fn read_name(msg: &[u8], start: usize) -> Result<(String, usize), DnsError> {
    let mut name = String::new();
    let mut pos = start;
    let mut resume: Option<usize> = None;
    let mut visited: HashSet<usize> = HashSet::new();
    let mut wire_len = 0usize;

    loop {
        let Some(&len) = msg.get(pos) else {
            return malformed(format!("name runs past end of message at offset {pos}"));
        };
        match len & 0xc0 {
            0xc0 => {
                let Some(&lo) = msg.get(pos + 1) else {
                    return malformed("truncated compression pointer");
                };
                let target = (usize::from(len & 0x3f) << 8) | usize::from(lo);
                if !visited.insert(target) {
                    return malformed(format!("compression pointer cycle at offset {target}"));
                }
                if target >= msg.len() {
                    return malformed(format!("compression pointer {target} out of range"));
                }
                resume.get_or_insert(pos + 2);
                pos = target;
            }
            0x00 => {
                let len = usize::from(len);
                if len == 0 {
                    let next = resume.unwrap_or(pos + 1);
                    return Ok((name, next));
                }
                if len > MAX_LABEL_LEN {
                    return malformed(format!("label of {len} bytes"));
                }
                let Some(label) = msg.get(pos + 1..pos + 1 + len) else {
                    return malformed("label runs past end of message");
                };
                wire_len += len + 1;
                if wire_len > MAX_NAME_LEN {
                    return malformed("name exceeds 255 bytes");
                }
                if !name.is_empty() {
                    name.push('.');
                }
                name.push_str(&String::from_utf8_lossy(label).to_ascii_lowercase());
                pos += 1 + len;
            }
            _ => return malformed(format!("reserved label type {len:#04x}")),
        }
    }
}

/// Parses a DNS message, keeping the first question's name and all IN/A
/// answers. CNAME and other records are skipped.
pub fn parse_message(msg: &[u8]) -> Result<DnsResponse, DnsError> {
    if msg.len() < HEADER_LEN {
        return malformed(format!("{} bytes is shorter than the header", msg.len()));
    }
    let txn_id = read_u16(msg, 0)?;
    let flags = read_u16(msg, 2)?;
    if flags & 0x8000 == 0 {
        return Err(DnsError::NotAResponse);
    }
    let qdcount = read_u16(msg, 4)?;
    let ancount = read_u16(msg, 6)?;
    if qdcount == 0 {
        return malformed("response carries no question");
    }

    let mut pos = HEADER_LEN;
    let mut query_name = String::new();
    for i in 0..qdcount {
        let (name, next) = read_name(msg, pos)?;
        if i == 0 {
            query_name = name;
        }
        pos = next + 4;
        if pos > msg.len() {
            return malformed("truncated question");
        }
    }
    if query_name.is_empty() {
        return malformed("empty query name");
    }

    let mut answers = Vec::new();
    for _ in 0..ancount {
        let (name, next) = read_name(msg, pos)?;
        let rtype = read_u16(msg, next)?;
        let class = read_u16(msg, next + 2)?;
        let rdlen = usize::from(read_u16(msg, next + 8)?);
        let rdata_start = next + 10;
        let Some(rdata) = msg.get(rdata_start..rdata_start + rdlen) else {
            return malformed("answer rdata runs past end of message");
        };
        if rtype == TYPE_A && class == CLASS_IN {
            if rdlen != 4 {
                return malformed(format!("A record with rdlength {rdlen}"));
            }
            answers.push(DnsAnswer {
                name,
                record_type: TYPE_A,
                ip: Ipv4Addr::new(rdata[0], rdata[1], rdata[2], rdata[3]),
            });
        }
        pos = rdata_start + rdlen;
    }

    Ok(DnsResponse {
        txn_id,
        is_response: true,
        query_name,
        answers,
    })
}

/// Checks that a response can be re-encoded and parsed back unchanged.
pub fn validate_for_encoding(resp: &DnsResponse) -> Result<(), DnsError> {
    let check = |name: &str| -> Result<(), DnsError> {
        if name.is_empty() || name.len() > 253 {
            return malformed(format!("name {name:?} has invalid length"));
        }
        for label in name.split('.') {
            if label.is_empty() || label.len() > MAX_LABEL_LEN {
                return malformed(format!("name {name:?} has an invalid label"));
            }
        }
        if name
            .bytes()
            .any(|b| !b.is_ascii_graphic() || b.is_ascii_uppercase())
        {
            return malformed(format!("name {name:?} is not lowercase printable ASCII"));
        }
        Ok(())
    };
    check(&resp.query_name)?;
    for ans in &resp.answers {
        check(&ans.name)?;
        if ans.record_type != TYPE_A {
            return malformed("only A answers can be encoded");
        }
    }
    Ok(())
}

fn push_name(out: &mut Vec<u8>, name: &str) {
    for label in name.split('.') {
        out.push(label.len() as u8);
        out.extend_from_slice(label.as_bytes());
    }
    out.push(0);
}

/// Encodes a response with one question. Answers whose owner is the query
/// name use a pointer to offset 12.
pub fn encode_response(resp: &DnsResponse) -> Vec<u8> {
    let mut out = Vec::with_capacity(64);
    out.extend_from_slice(&resp.txn_id.to_be_bytes());
    let flags: u16 = if resp.is_response { 0x8180 } else { 0x0100 };
    out.extend_from_slice(&flags.to_be_bytes());
    out.extend_from_slice(&1u16.to_be_bytes());
    out.extend_from_slice(&(resp.answers.len() as u16).to_be_bytes());
    out.extend_from_slice(&[0, 0, 0, 0]);
    push_name(&mut out, &resp.query_name);
    out.extend_from_slice(&TYPE_A.to_be_bytes());
    out.extend_from_slice(&CLASS_IN.to_be_bytes());
    for ans in &resp.answers {
        if ans.name == resp.query_name {
            out.extend_from_slice(&[0xc0, 0x0c]);
        } else {
            push_name(&mut out, &ans.name);
        }
        out.extend_from_slice(&ans.record_type.to_be_bytes());
        out.extend_from_slice(&CLASS_IN.to_be_bytes());
        out.extend_from_slice(&ENCODED_TTL.to_be_bytes());
        out.extend_from_slice(&4u16.to_be_bytes());
        out.extend_from_slice(&ans.ip.octets());
    }
    out
}

pub fn encoded_len(resp: &DnsResponse) -> usize {
    encode_response(resp).len()
}
