//! Whitelist profiles built from benign traffic.
//!
//! A profile entry is the tuple (device MAC, external address, direction,
//! frame length). Profiles index entries by direction and external address so
//! the monitor can look a packet up in constant time.

mod config;
pub mod csv_io;
mod store;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::net::Ipv4Addr;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dns::DnsResponse;
use crate::packet::{Mac, PacketRecord, Transport, ETHERTYPE_ARP, ETHERTYPE_EAPOL};

pub use config::{default_local_cidrs, Ipv4Cidr, NetworkConfig, DEFAULT_CHECKPOINT_INTERVAL};
pub use csv_io::{
    load_hostname_map, load_profiles, parse_profiles, save_hostname_map, save_profiles,
    write_profiles,
};
pub use store::ProfileStore;

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error(
        "both {src} and {dst} are monitored devices; peer-to-peer traffic is not part of the model"
    )]
    BothMonitored { src: Mac, dst: Mac },
    #[error("row {row}: {message}")]
    Parse { row: usize, message: String },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Direction {
    #[serde(rename = "SERVER_TO_DEVICE")]
    ServerToDevice,
    #[serde(rename = "DEVICE_TO_SERVER")]
    DeviceToServer,
    #[serde(rename = "DEVICE_TO_USER")]
    DeviceToUser,
    #[serde(rename = "USER_TO_DEVICE")]
    UserToDevice,
}

impl Direction {
    pub const ALL: [Direction; 4] = [
        Direction::ServerToDevice,
        Direction::DeviceToServer,
        Direction::DeviceToUser,
        Direction::UserToDevice,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Direction::ServerToDevice => "SERVER_TO_DEVICE",
            Direction::DeviceToServer => "DEVICE_TO_SERVER",
            Direction::DeviceToUser => "DEVICE_TO_USER",
            Direction::UserToDevice => "USER_TO_DEVICE",
        }
    }

    pub fn from_device(self) -> bool {
        matches!(self, Direction::DeviceToServer | Direction::DeviceToUser)
    }
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Direction {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Direction::ALL
            .into_iter()
            .find(|d| d.as_str() == s)
            .ok_or_else(|| format!("unknown packet direction {s:?}"))
    }
}

/// The whitelist unit.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ProfileEntry {
    pub device_mac: Mac,
    pub external_address: String,
    pub direction: Direction,
    pub length: u32,
    pub device_name: String,
}

impl ProfileEntry {
    fn sort_key(&self) -> (Mac, &str, Direction, u32) {
        (
            self.device_mac,
            &self.external_address,
            self.direction,
            self.length,
        )
    }
}

/// Per-device whitelist, indexed `direction -> external address -> lengths`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DeviceProfile {
    pub device_mac: Mac,
    pub device_name: String,
    index: HashMap<Direction, HashMap<String, BTreeSet<u32>>>,
    entries: usize,
}

impl DeviceProfile {
    pub fn new(device_mac: Mac, device_name: impl Into<String>) -> Self {
        DeviceProfile {
            device_mac,
            device_name: device_name.into(),
            index: HashMap::new(),
            entries: 0,
        }
    }

    /// Adds an entry; returns false if it was already present.
    ///
    /// # Panics
    /// If the entry belongs to another device.
    pub fn insert(&mut self, entry: &ProfileEntry) -> bool {
        assert_eq!(
            entry.device_mac, self.device_mac,
            "entry for a different device"
        );
        self.insert_parts(&entry.external_address, entry.direction, entry.length)
    }

    pub fn insert_parts(&mut self, external: &str, direction: Direction, length: u32) -> bool {
        let by_addr = self.index.entry(direction).or_default();
        let lengths = match by_addr.get_mut(external) {
            Some(set) => set,
            None => by_addr.entry(external.to_string()).or_default(),
        };
        let added = lengths.insert(length);
        if added {
            self.entries += 1;
        }
        added
    }

    pub fn lengths(&self, external: &str, direction: Direction) -> Option<&BTreeSet<u32>> {
        self.index.get(&direction)?.get(external)
    }

    pub fn contains(&self, external: &str, direction: Direction, length: u32) -> bool {
        self.lengths(external, direction)
            .is_some_and(|s| s.contains(&length))
    }

    /// All external addresses seen in `direction`, with their lengths.
    pub fn endpoints(&self, direction: Direction) -> impl Iterator<Item = (&str, &BTreeSet<u32>)> {
        self.index
            .get(&direction)
            .into_iter()
            .flat_map(|m| m.iter().map(|(k, v)| (k.as_str(), v)))
    }

    pub fn entry_count(&self) -> usize {
        self.entries
    }

    /// Number of distinct (direction, external address) pairs.
    pub fn endpoint_count(&self) -> usize {
        self.index.values().map(HashMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.entries == 0
    }

    /// Entries sorted by (external address, direction, length).
    pub fn entries(&self) -> Vec<ProfileEntry> {
        let mut out: Vec<ProfileEntry> = self
            .index
            .iter()
            .flat_map(|(dir, by_addr)| {
                by_addr.iter().flat_map(move |(addr, lens)| {
                    lens.iter().map(move |&length| ProfileEntry {
                        device_mac: self.device_mac,
                        external_address: addr.clone(),
                        direction: *dir,
                        length,
                        device_name: self.device_name.clone(),
                    })
                })
            })
            .collect();
        out.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
        out
    }

    pub fn merge(&mut self, other: &DeviceProfile) {
        for (dir, by_addr) in &other.index {
            for (addr, lens) in by_addr {
                for &len in lens {
                    self.insert_parts(addr, *dir, len);
                }
            }
        }
    }
}

/// Profiles keyed by device MAC.
pub type ProfileSet = BTreeMap<Mac, DeviceProfile>;

pub fn total_entries(profiles: &ProfileSet) -> usize {
    profiles.values().map(DeviceProfile::entry_count).sum()
}

/// IP to hostname mapping learned from DNS answers. Later answers replace
/// earlier ones.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HostnameMap {
    map: HashMap<Ipv4Addr, String>,
}

impl HostnameMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, ip: Ipv4Addr, hostname: &str) {
        self.map.insert(ip, hostname.trim().to_ascii_lowercase());
    }

    /// Maps every A answer to the queried name, so CNAME targets resolve to
    /// the name the device asked for.
    pub fn learn(&mut self, resp: &DnsResponse) {
        for ans in &resp.answers {
            self.insert(ans.ip, &resp.query_name);
        }
    }

    pub fn get(&self, ip: &Ipv4Addr) -> Option<&str> {
        self.map.get(ip).map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Ipv4Addr, &String)> {
        self.map.iter()
    }

    pub fn into_inner(self) -> HashMap<Ipv4Addr, String> {
        self.map
    }
}

const CONFIG_PORTS: [u16; 5] = [53, 67, 68, 123, 5353];
const MDNS_PORT: u16 = 5353;

/// True for ARP, EAPOL, DNS, DHCP/BOOTP, NTP and mDNS traffic.
pub fn is_config_packet(record: &PacketRecord) -> bool {
    is_config_packet_with(record, false)
}

/// As [`is_config_packet`]; with `keep_multicast` mDNS is treated as ordinary traffic.
pub fn is_config_packet_with(record: &PacketRecord, keep_multicast: bool) -> bool {
    if matches!(record.ethertype, ETHERTYPE_ARP | ETHERTYPE_EAPOL) {
        return true;
    }
    if !matches!(record.transport, Transport::Tcp | Transport::Udp) {
        return false;
    }
    CONFIG_PORTS
        .iter()
        .filter(|&&p| !(keep_multicast && p == MDNS_PORT))
        .any(|&p| record.has_port(p))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ResolvedDirection {
    pub device_mac: Mac,
    pub direction: Direction,
    pub external_ip: Ipv4Addr,
}

/// Works out which side is the monitored device. `Ok(None)` means the
/// packet involves no monitored device or has no IPv4 layer.
pub fn resolve_direction(
    record: &PacketRecord,
    cfg: &NetworkConfig,
) -> Result<Option<ResolvedDirection>, ProfileError> {
    let (Some(src_ip), Some(dst_ip)) = (record.src_ip, record.dst_ip) else {
        return Ok(None);
    };
    let src_mon = cfg.is_monitored(&record.src_mac);
    let dst_mon = cfg.is_monitored(&record.dst_mac);
    let resolved = match (src_mon, dst_mon) {
        (true, true) => {
            return Err(ProfileError::BothMonitored {
                src: record.src_mac,
                dst: record.dst_mac,
            })
        }
        (true, false) => ResolvedDirection {
            device_mac: record.src_mac,
            direction: if cfg.is_local(dst_ip) {
                Direction::DeviceToUser
            } else {
                Direction::DeviceToServer
            },
            external_ip: dst_ip,
        },
        (false, true) => ResolvedDirection {
            device_mac: record.dst_mac,
            direction: if cfg.is_local(src_ip) {
                Direction::UserToDevice
            } else {
                Direction::ServerToDevice
            },
            external_ip: src_ip,
        },
        (false, false) => return Ok(None),
    };
    Ok(Some(resolved))
}

/// Local addresses stay numeric. Remote ones prefer the learned DNS name,
/// then the reverse lookup table, then the dotted quad.
pub fn external_address_of(ip: Ipv4Addr, map: &HostnameMap, cfg: &NetworkConfig) -> String {
    if cfg.is_local(ip) {
        return ip.to_string();
    }
    if let Some(name) = map.get(&ip) {
        return name.to_string();
    }
    match cfg.reverse_dns.get(&ip) {
        Some(name) => name.trim().to_ascii_lowercase(),
        None => ip.to_string(),
    }
}

/// Derives the profile entry for a packet, or `None` for config traffic and
/// packets not involving a monitored device.
pub fn build_entry(
    record: &PacketRecord,
    cfg: &NetworkConfig,
    map: &HostnameMap,
) -> Result<Option<ProfileEntry>, ProfileError> {
    if is_config_packet_with(record, cfg.keep_multicast) {
        return Ok(None);
    }
    let Some(resolved) = resolve_direction(record, cfg)? else {
        return Ok(None);
    };
    Ok(Some(ProfileEntry {
        device_mac: resolved.device_mac,
        external_address: external_address_of(resolved.external_ip, map, cfg),
        direction: resolved.direction,
        length: record.frame_len,
        device_name: cfg.device_name(&resolved.device_mac).to_string(),
    }))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct TrainStats {
    pub packets: usize,
    pub entries_observed: usize,
    pub skipped: usize,
    pub errors: usize,
    pub dns_responses: usize,
    pub checkpoints: usize,
}

/// Incremental trainer. Entries are buffered and merged into the shared
/// store every `checkpoint_interval` packets; the monitored MAC list is
/// re-read from the store at each boundary.
pub struct Profiler<'s> {
    cfg: NetworkConfig,
    hostnames: HostnameMap,
    store: &'s ProfileStore,
    pending: Vec<ProfileEntry>,
    since_checkpoint: usize,
    stats: TrainStats,
}

impl<'s> Profiler<'s> {
    pub fn new(cfg: NetworkConfig, hostnames: HostnameMap, store: &'s ProfileStore) -> Self {
        let mut cfg = cfg;
        cfg.monitored_macs = store.monitored_macs();
        Profiler {
            cfg,
            hostnames,
            store,
            pending: Vec::new(),
            since_checkpoint: 0,
            stats: TrainStats::default(),
        }
    }

    pub fn observe(&mut self, record: &PacketRecord) {
        self.stats.packets += 1;
        if let Some(resp) = &record.dns {
            self.hostnames.learn(resp);
            self.stats.dns_responses += 1;
        }
        match build_entry(record, &self.cfg, &self.hostnames) {
            Ok(Some(entry)) => {
                self.stats.entries_observed += 1;
                self.pending.push(entry);
            }
            Ok(None) => self.stats.skipped += 1,
            Err(e) => {
                log::debug!("training skipped packet {}: {e}", self.stats.packets - 1);
                self.stats.errors += 1;
            }
        }
        self.since_checkpoint += 1;
        if self.since_checkpoint >= self.cfg.checkpoint_interval {
            self.checkpoint();
        }
    }

    pub fn checkpoint(&mut self) {
        self.store
            .merge_entries(&self.pending, &self.cfg.device_names);
        self.pending.clear();
        self.since_checkpoint = 0;
        self.cfg.monitored_macs = self.store.monitored_macs();
        self.stats.checkpoints += 1;
    }

    pub fn hostnames(&self) -> &HostnameMap {
        &self.hostnames
    }

    pub fn stats(&self) -> TrainStats {
        self.stats
    }

    /// Flushes pending entries and returns the learned hostnames.
    pub fn finish(mut self) -> (HostnameMap, TrainStats) {
        if !self.pending.is_empty() || self.since_checkpoint > 0 {
            self.checkpoint();
        }
        (self.hostnames, self.stats)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub profiles: ProfileSet,
    pub hostnames: HostnameMap,
    pub stats: TrainStats,
}

/// Trains profiles for every monitored MAC over a benign trace. Devices
/// with no traffic get empty profiles.
pub fn train(records: &[PacketRecord], cfg: &NetworkConfig, map: &HostnameMap) -> TrainOutcome {
    let store = ProfileStore::new(cfg.monitored_macs.iter().copied());
    let mut profiler = Profiler::new(cfg.clone(), map.clone(), &store);
    for rec in records {
        profiler.observe(rec);
    }
    let (hostnames, stats) = profiler.finish();
    let mut profiles = store.snapshot();
    for mac in store.monitored_macs() {
        profiles
            .entry(mac)
            .or_insert_with(|| DeviceProfile::new(mac, cfg.device_name(&mac)));
    }
    TrainOutcome {
        profiles,
        hostnames,
        stats,
    }
}
