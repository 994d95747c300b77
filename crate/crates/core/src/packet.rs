//! Decoded frame representation and the Ethernet/IPv4/UDP/TCP codec.
//!
//! A [`PacketRecord`] keeps only header metadata. Encoding a record rebuilds a
//! canonical frame whose headers agree with the record's fields; payload bytes
//! are zero except for DNS responses, which are re-serialized from the parsed
//! message.

use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dns::{self, DnsResponse};

pub const ETH_HEADER_LEN: usize = 14;
pub const IPV4_HEADER_LEN: usize = 20;
pub const UDP_HEADER_LEN: usize = 8;
pub const TCP_HEADER_LEN: usize = 20;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
pub const ETHERTYPE_EAPOL: u16 = 0x888e;

const IPPROTO_ICMP: u8 = 1;
const IPPROTO_TCP: u8 = 6;
const IPPROTO_UDP: u8 = 17;

pub const DNS_PORT: u16 = 53;

/// 48-bit hardware address.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Mac(pub [u8; 6]);

impl Mac {
    pub const fn new(bytes: [u8; 6]) -> Self {
        Mac(bytes)
    }

    pub fn octets(&self) -> [u8; 6] {
        self.0
    }
}

impl fmt::Display for Mac {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = self.0;
        write!(
            f,
            "{:02x}:{:02x}:{:02x}:{:02x}:{:02x}:{:02x}",
            b[0], b[1], b[2], b[3], b[4], b[5]
        )
    }
}

impl fmt::Debug for Mac {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid MAC address {0:?}")]
pub struct MacParseError(pub String);

impl FromStr for Mac {
    type Err = MacParseError;

    /// Accepts `aa:bb:cc:dd:ee:ff` or `aa-bb-cc-dd-ee-ff`, either case.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || MacParseError(s.to_string());
        let mut out = [0u8; 6];
        let mut parts = s.trim().split([':', '-']);
        for byte in out.iter_mut() {
            let part = parts.next().ok_or_else(err)?;
            if part.len() != 2 {
                return Err(err());
            }
            *byte = u8::from_str_radix(part, 16).map_err(|_| err())?;
        }
        if parts.next().is_some() {
            return Err(err());
        }
        Ok(Mac(out))
    }
}

impl Serialize for Mac {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Mac {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Transport {
    Tcp,
    Udp,
    Other,
}

/// One decoded frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PacketRecord {
    pub ts_sec: u32,
    pub ts_usec: u32,
    pub src_mac: Mac,
    pub dst_mac: Mac,
    pub src_ip: Option<Ipv4Addr>,
    pub dst_ip: Option<Ipv4Addr>,
    pub src_port: Option<u16>,
    pub dst_port: Option<u16>,
    pub transport: Transport,
    pub ethertype: u16,
    /// Original on-wire length, Ethernet header included.
    pub frame_len: u32,
    pub dns: Option<DnsResponse>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FrameError {
    #[error("frame of {0} bytes is shorter than an Ethernet header")]
    TooShort(usize),
    #[error("record cannot be encoded: {0}")]
    InvalidRecord(String),
}

impl PacketRecord {
    /// Timestamp in microseconds since the epoch.
    pub fn timestamp_micros(&self) -> u64 {
        u64::from(self.ts_sec) * 1_000_000 + u64::from(self.ts_usec)
    }

    pub fn has_port(&self, port: u16) -> bool {
        self.src_port == Some(port) || self.dst_port == Some(port)
    }

    /// Smallest frame length that can carry this record's headers.
    pub fn min_frame_len(&self) -> usize {
        let ip = if self.src_ip.is_some() {
            IPV4_HEADER_LEN
        } else {
            0
        };
        let l4 = match self.transport {
            Transport::Tcp => TCP_HEADER_LEN,
            Transport::Udp => UDP_HEADER_LEN + self.dns.as_ref().map_or(0, dns::encoded_len),
            Transport::Other => 0,
        };
        ETH_HEADER_LEN + ip + l4
    }

    /// Checks the field combinations the encoder relies on.
    pub fn validate(&self) -> Result<(), FrameError> {
        let bad = |msg: &str| Err(FrameError::InvalidRecord(msg.to_string()));
        if self.src_ip.is_some() != self.dst_ip.is_some() {
            return bad("source and destination IPs must both be present or both absent");
        }
        if self.src_port.is_some() != self.dst_port.is_some() {
            return bad("source and destination ports must both be present or both absent");
        }
        let has_ip = self.src_ip.is_some();
        if has_ip && self.ethertype != ETHERTYPE_IPV4 {
            return bad("IP addresses require ethertype 0x0800");
        }
        let l4 = matches!(self.transport, Transport::Tcp | Transport::Udp);
        if l4 && !has_ip {
            return bad("TCP/UDP records require IP addresses");
        }
        if l4 != self.src_port.is_some() {
            return bad("ports are present iff transport is TCP or UDP");
        }
        if self.ts_usec >= 1_000_000 {
            return bad("ts_usec must be below one second");
        }
        if let Some(dns) = &self.dns {
            if self.transport != Transport::Udp || !self.has_port(DNS_PORT) {
                return bad("DNS payload requires UDP port 53");
            }
            if !dns.is_response {
                return bad("only DNS responses are carried in records");
            }
            dns::validate_for_encoding(dns)
                .map_err(|e| FrameError::InvalidRecord(e.to_string()))?;
        }
        let frame_len = self.frame_len as usize;
        if frame_len < self.min_frame_len() {
            return Err(FrameError::InvalidRecord(format!(
                "frame_len {} below the {} bytes its headers need",
                frame_len,
                self.min_frame_len()
            )));
        }
        if has_ip && frame_len - ETH_HEADER_LEN > usize::from(u16::MAX) {
            return bad("IPv4 total length exceeds 65535");
        }
        Ok(())
    }
}

fn be16(b: &[u8], at: usize) -> u16 {
    u16::from_be_bytes([b[at], b[at + 1]])
}

fn ipv4_checksum(header: &[u8]) -> u16 {
    let mut sum: u32 = header
        .chunks(2)
        .map(|c| u32::from(u16::from_be_bytes([c[0], *c.get(1).unwrap_or(&0)])))
        .sum();
    while sum > 0xffff {
        sum = (sum & 0xffff) + (sum >> 16);
    }
    !(sum as u16)
}

/// Serializes a record into a canonical Ethernet frame of exactly `frame_len` bytes.
pub fn encode_frame(rec: &PacketRecord) -> Result<Vec<u8>, FrameError> {
    rec.validate()?;
    let frame_len = rec.frame_len as usize;
    let mut out = Vec::with_capacity(frame_len);
    out.extend_from_slice(&rec.dst_mac.0);
    out.extend_from_slice(&rec.src_mac.0);
    out.extend_from_slice(&rec.ethertype.to_be_bytes());

    if let (Some(src), Some(dst)) = (rec.src_ip, rec.dst_ip) {
        let proto = match rec.transport {
            Transport::Tcp => IPPROTO_TCP,
            Transport::Udp => IPPROTO_UDP,
            Transport::Other => IPPROTO_ICMP,
        };
        let total_len = (frame_len - ETH_HEADER_LEN) as u16;
        let mut ip = [0u8; IPV4_HEADER_LEN];
        ip[0] = 0x45;
        ip[2..4].copy_from_slice(&total_len.to_be_bytes());
        ip[6] = 0x40; // DF
        ip[8] = 64;
        ip[9] = proto;
        ip[12..16].copy_from_slice(&src.octets());
        ip[16..20].copy_from_slice(&dst.octets());
        let csum = ipv4_checksum(&ip);
        ip[10..12].copy_from_slice(&csum.to_be_bytes());
        out.extend_from_slice(&ip);

        let (sport, dport) = (rec.src_port.unwrap_or(0), rec.dst_port.unwrap_or(0));
        match rec.transport {
            Transport::Tcp => {
                let mut tcp = [0u8; TCP_HEADER_LEN];
                tcp[0..2].copy_from_slice(&sport.to_be_bytes());
                tcp[2..4].copy_from_slice(&dport.to_be_bytes());
                tcp[12] = 0x50;
                tcp[13] = 0x18; // PSH|ACK
                tcp[14..16].copy_from_slice(&0xffffu16.to_be_bytes());
                out.extend_from_slice(&tcp);
            }
            Transport::Udp => {
                let udp_len = (frame_len - ETH_HEADER_LEN - IPV4_HEADER_LEN) as u16;
                out.extend_from_slice(&sport.to_be_bytes());
                out.extend_from_slice(&dport.to_be_bytes());
                out.extend_from_slice(&udp_len.to_be_bytes());
                out.extend_from_slice(&[0, 0]);
                if let Some(resp) = &rec.dns {
                    out.extend_from_slice(&dns::encode_response(resp));
                }
            }
            Transport::Other => {}
        }
    }
    out.resize(frame_len, 0);
    Ok(out)
}

/// Decodes a captured frame. `orig_len` is the on-wire length from the
/// capture header, which may exceed `data.len()` for snapped captures.
///
/// Anything past a valid Ethernet header yields a record; unsupported or
/// malformed upper layers decode as [`Transport::Other`].
pub fn decode_frame(
    data: &[u8],
    ts_sec: u32,
    ts_usec: u32,
    orig_len: u32,
) -> Result<PacketRecord, FrameError> {
    if data.len() < ETH_HEADER_LEN {
        return Err(FrameError::TooShort(data.len()));
    }
    let mut dst = [0u8; 6];
    let mut src = [0u8; 6];
    dst.copy_from_slice(&data[0..6]);
    src.copy_from_slice(&data[6..12]);
    let ethertype = be16(data, 12);

    let mut rec = PacketRecord {
        ts_sec,
        ts_usec,
        src_mac: Mac(src),
        dst_mac: Mac(dst),
        src_ip: None,
        dst_ip: None,
        src_port: None,
        dst_port: None,
        transport: Transport::Other,
        ethertype,
        frame_len: orig_len,
        dns: None,
    };
    if ethertype != ETHERTYPE_IPV4 {
        return Ok(rec);
    }

    let ip = &data[ETH_HEADER_LEN..];
    if ip.len() < IPV4_HEADER_LEN || ip[0] >> 4 != 4 {
        return Ok(rec);
    }
    let ihl = usize::from(ip[0] & 0x0f) * 4;
    if ihl < IPV4_HEADER_LEN || ip.len() < ihl {
        return Ok(rec);
    }
    rec.src_ip = Some(Ipv4Addr::new(ip[12], ip[13], ip[14], ip[15]));
    rec.dst_ip = Some(Ipv4Addr::new(ip[16], ip[17], ip[18], ip[19]));

    let flags_frag = be16(ip, 6);
    let fragmented = flags_frag & 0x2000 != 0 || flags_frag & 0x1fff != 0;
    if fragmented {
        return Ok(rec);
    }
    // Clamp the transport segment to the IPv4 total length when it is sane.
    let total_len = usize::from(be16(ip, 2));
    let ip_end = if total_len >= ihl && total_len <= ip.len() {
        total_len
    } else {
        ip.len()
    };
    let l4 = &ip[ihl..ip_end];

    match ip[9] {
        IPPROTO_TCP if l4.len() >= TCP_HEADER_LEN => {
            rec.transport = Transport::Tcp;
            rec.src_port = Some(be16(l4, 0));
            rec.dst_port = Some(be16(l4, 2));
        }
        IPPROTO_UDP if l4.len() >= UDP_HEADER_LEN => {
            rec.transport = Transport::Udp;
            rec.src_port = Some(be16(l4, 0));
            rec.dst_port = Some(be16(l4, 2));
            if rec.has_port(DNS_PORT) {
                let udp_len = usize::from(be16(l4, 4));
                let end = if udp_len >= UDP_HEADER_LEN && udp_len <= l4.len() {
                    udp_len
                } else {
                    l4.len()
                };
                rec.dns = dns::parse_message(&l4[UDP_HEADER_LEN..end]).ok();
            }
        }
        _ => {}
    }
    Ok(rec)
}
