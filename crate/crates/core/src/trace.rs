//! Deterministic synthetic traffic for tests, demos and benchmarks.

use std::collections::HashSet;
use std::net::Ipv4Addr;

use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dns::{self, DnsAnswer, DnsResponse};
use crate::packet::{
    Mac, PacketRecord, Transport, DNS_PORT, ETHERTYPE_IPV4, ETH_HEADER_LEN, IPV4_HEADER_LEN,
    TCP_HEADER_LEN, UDP_HEADER_LEN,
};

/// Ground truth attached to each generated packet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malicious,
    /// Infrastructure traffic (DNS preambles) that never reaches a profile.
    Config,
}

impl Label {
    pub fn as_str(self) -> &'static str {
        match self {
            Label::Benign => "benign",
            Label::Malicious => "malicious",
            Label::Config => "config",
        }
    }
}

impl std::str::FromStr for Label {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "benign" => Ok(Label::Benign),
            "malicious" | "malware" => Ok(Label::Malicious),
            "config" => Ok(Label::Config),
            other => Err(format!("unknown label {other:?}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    Ip(Ipv4Addr),
    /// Reached by name; a DNS answer for `name -> ip` precedes first use.
    Host {
        name: String,
        ip: Ipv4Addr,
    },
}

impl Endpoint {
    pub fn host(name: &str, ip: Ipv4Addr) -> Self {
        Endpoint::Host {
            name: name.to_ascii_lowercase(),
            ip,
        }
    }

    pub fn ip(&self) -> Ipv4Addr {
        match self {
            Endpoint::Ip(ip) | Endpoint::Host { ip, .. } => *ip,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PacketDir {
    FromDevice,
    ToDevice,
}

/// A conversation between one device and one peer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FlowSpec {
    pub device_mac: Mac,
    pub device_ip: Ipv4Addr,
    /// Gateway MAC for remote peers, the peer's own MAC on the LAN.
    pub peer_mac: Mac,
    pub peer: Endpoint,
    pub transport: Transport,
    pub device_port: u16,
    pub peer_port: u16,
    /// Frame lengths in emission order.
    pub packets: Vec<(PacketDir, u32)>,
    pub repeat: usize,
    pub label: Label,
}

impl FlowSpec {
    pub fn new(
        device_mac: Mac,
        device_ip: Ipv4Addr,
        peer_mac: Mac,
        peer: Endpoint,
        transport: Transport,
    ) -> Self {
        FlowSpec {
            device_mac,
            device_ip,
            peer_mac,
            peer,
            transport,
            device_port: 49152,
            peer_port: 443,
            packets: Vec::new(),
            repeat: 1,
            label: Label::Benign,
        }
    }

    pub fn ports(mut self, device_port: u16, peer_port: u16) -> Self {
        self.device_port = device_port;
        self.peer_port = peer_port;
        self
    }

    pub fn send(mut self, len: u32) -> Self {
        self.packets.push((PacketDir::FromDevice, len));
        self
    }

    pub fn recv(mut self, len: u32) -> Self {
        self.packets.push((PacketDir::ToDevice, len));
        self
    }

    pub fn repeat(mut self, n: usize) -> Self {
        self.repeat = n;
        self
    }

    pub fn malicious(mut self) -> Self {
        self.label = Label::Malicious;
        self
    }

    fn min_len(&self) -> u32 {
        let l4 = match self.transport {
            Transport::Tcp => TCP_HEADER_LEN,
            Transport::Udp => UDP_HEADER_LEN,
            Transport::Other => 0,
        };
        (ETH_HEADER_LEN + IPV4_HEADER_LEN + l4) as u32
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TraceError {
    #[error("flow {flow}: {reason}")]
    InvalidSpec { flow: usize, reason: String },
}

#[derive(Debug, Clone)]
pub struct TraceOptions {
    pub seed: u64,
    pub start_ts_sec: u32,
    /// Upper bound on the random gap between consecutive packets.
    pub max_gap_usec: u32,
    pub dns_server: Ipv4Addr,
}

impl Default for TraceOptions {
    fn default() -> Self {
        TraceOptions {
            seed: 0,
            start_ts_sec: 1_700_000_000,
            max_gap_usec: 50_000,
            dns_server: Ipv4Addr::new(192, 168, 4, 1),
        }
    }
}

/// Generated records with per-packet ground truth (`labels[i]` describes `records[i]`).
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Trace {
    pub records: Vec<PacketRecord>,
    pub labels: Vec<Label>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn extend(&mut self, other: Trace) {
        self.records.extend(other.records);
        self.labels.extend(other.labels);
    }
}

/// One label per line, in packet order, under a `LABEL` header.
pub fn write_labels<W: std::io::Write>(labels: &[Label], mut out: W) -> std::io::Result<()> {
    writeln!(out, "LABEL")?;
    for l in labels {
        writeln!(out, "{}", l.as_str())?;
    }
    out.flush()
}

/// Inverse of [`write_labels`]; the header and blank lines are optional.
pub fn read_labels<R: std::io::Read>(mut input: R) -> Result<Vec<Label>, String> {
    let mut text = String::new();
    input.read_to_string(&mut text).map_err(|e| e.to_string())?;
    text.lines()
        .enumerate()
        .filter(|(i, l)| {
            !(l.trim().is_empty() || (*i == 0 && l.trim().eq_ignore_ascii_case("label")))
        })
        .map(|(i, l)| l.parse().map_err(|e| format!("line {}: {e}", i + 1)))
        .collect()
}

struct Clock {
    micros: u64,
    max_gap: u32,
}

impl Clock {
    fn tick(&mut self, rng: &mut StdRng) -> (u32, u32) {
        self.micros += 1 + u64::from(rng.gen_range(0..=self.max_gap));
        (
            (self.micros / 1_000_000) as u32,
            (self.micros % 1_000_000) as u32,
        )
    }
}

pub fn generate_trace(script: &[FlowSpec], opts: &TraceOptions) -> Result<Trace, TraceError> {
    let mut rng = StdRng::seed_from_u64(opts.seed);
    let mut clock = Clock {
        micros: u64::from(opts.start_ts_sec) * 1_000_000,
        max_gap: opts.max_gap_usec,
    };
    let mut announced: HashSet<(Mac, String, Ipv4Addr)> = HashSet::new();
    let mut trace = Trace::default();

    for (i, flow) in script.iter().enumerate() {
        let invalid = |reason: String| TraceError::InvalidSpec { flow: i, reason };
        if flow.transport == Transport::Other {
            return Err(invalid("flows must be TCP or UDP".into()));
        }
        if flow.device_mac == flow.peer_mac {
            return Err(invalid("device and peer share a MAC".into()));
        }
        if let Some(&(_, len)) = flow.packets.iter().find(|(_, len)| *len < flow.min_len()) {
            return Err(invalid(format!(
                "frame length {len} below the {} byte minimum",
                flow.min_len()
            )));
        }
        if flow.repeat == 0 || flow.packets.is_empty() {
            continue;
        }

        if let Endpoint::Host { name, ip } = &flow.peer {
            if announced.insert((flow.device_mac, name.clone(), *ip)) {
                let resp = DnsResponse {
                    txn_id: rng.gen(),
                    is_response: true,
                    query_name: name.clone(),
                    answers: vec![DnsAnswer {
                        name: name.clone(),
                        record_type: dns::TYPE_A,
                        ip: *ip,
                    }],
                };
                dns::validate_for_encoding(&resp).map_err(|e| invalid(e.to_string()))?;
                let frame_len =
                    (ETH_HEADER_LEN + IPV4_HEADER_LEN + UDP_HEADER_LEN + dns::encoded_len(&resp))
                        as u32;
                let (ts_sec, ts_usec) = clock.tick(&mut rng);
                trace.records.push(PacketRecord {
                    ts_sec,
                    ts_usec,
                    src_mac: flow.peer_mac,
                    dst_mac: flow.device_mac,
                    src_ip: Some(opts.dns_server),
                    dst_ip: Some(flow.device_ip),
                    src_port: Some(DNS_PORT),
                    dst_port: Some(rng.gen_range(1024..=65535)),
                    transport: Transport::Udp,
                    ethertype: ETHERTYPE_IPV4,
                    frame_len,
                    dns: Some(resp),
                });
                trace.labels.push(Label::Config);
            }
        }

        let peer_ip = flow.peer.ip();
        for _ in 0..flow.repeat {
            for &(dir, len) in &flow.packets {
                let (ts_sec, ts_usec) = clock.tick(&mut rng);
                let (src_mac, dst_mac, src_ip, dst_ip, sport, dport) = match dir {
                    PacketDir::FromDevice => (
                        flow.device_mac,
                        flow.peer_mac,
                        flow.device_ip,
                        peer_ip,
                        flow.device_port,
                        flow.peer_port,
                    ),
                    PacketDir::ToDevice => (
                        flow.peer_mac,
                        flow.device_mac,
                        peer_ip,
                        flow.device_ip,
                        flow.peer_port,
                        flow.device_port,
                    ),
                };
                trace.records.push(PacketRecord {
                    ts_sec,
                    ts_usec,
                    src_mac,
                    dst_mac,
                    src_ip: Some(src_ip),
                    dst_ip: Some(dst_ip),
                    src_port: Some(sport),
                    dst_port: Some(dport),
                    transport: flow.transport,
                    ethertype: ETHERTYPE_IPV4,
                    frame_len: len,
                    dns: None,
                });
                trace.labels.push(flow.label);
            }
        }
    }
    Ok(trace)
}
