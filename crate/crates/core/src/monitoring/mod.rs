//! Per-packet classification against device whitelists.

pub mod similarity;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::packet::{Mac, PacketRecord};
use crate::profiling::{
    build_entry, DeviceProfile, Direction, HostnameMap, NetworkConfig, ProfileEntry, ProfileError,
    ProfileSet, ProfileStore,
};

pub use similarity::{
    is_ip_literal, lcs_len, mask_digits, name_similarity, registrable_domain,
    DEFAULT_SIMILARITY_THRESHOLD,
};

#[derive(Debug, Error)]
pub enum MonitorError {
    #[error("entry for {entry} checked against the profile of {profile}")]
    MacMismatch { entry: Mac, profile: Mac },
    #[error("invalid match mode: {0}")]
    InvalidMode(String),
}

/// How packet lengths are compared once an endpoint matches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LengthRule {
    Strict,
    /// Accept when the length is within `k` bytes of a profiled length.
    Tolerance(u32),
    /// Ignore lengths entirely.
    EndpointOnly,
}

impl LengthRule {
    fn accepts(self, lengths: &std::collections::BTreeSet<u32>, len: u32) -> bool {
        match self {
            LengthRule::Strict => lengths.contains(&len),
            LengthRule::Tolerance(k) => lengths
                .range(len.saturating_sub(k)..=len.saturating_add(k))
                .next()
                .is_some(),
            LengthRule::EndpointOnly => true,
        }
    }
}

impl fmt::Display for LengthRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LengthRule::Strict => f.write_str("strict"),
            LengthRule::Tolerance(k) => write!(f, "tol:{k}"),
            LengthRule::EndpointOnly => f.write_str("endpoint"),
        }
    }
}

impl FromStr for LengthRule {
    type Err = MonitorError;

    /// `strict`, `endpoint`, or `tol:<k>`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "strict" => Ok(LengthRule::Strict),
            "endpoint" | "endpoint-only" => Ok(LengthRule::EndpointOnly),
            other => other
                .strip_prefix("tol:")
                .and_then(|k| k.parse().ok())
                .map(LengthRule::Tolerance)
                .ok_or_else(|| MonitorError::InvalidMode(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchMode {
    pub length: LengthRule,
    pub similarity_threshold: f64,
}

impl MatchMode {
    pub fn new(length: LengthRule, similarity_threshold: f64) -> Result<Self, MonitorError> {
        if !(0.0..=1.0).contains(&similarity_threshold) {
            return Err(MonitorError::InvalidMode(format!(
                "similarity threshold {similarity_threshold} outside [0, 1]"
            )));
        }
        Ok(MatchMode {
            length,
            similarity_threshold,
        })
    }

    pub fn strict() -> Self {
        Self::with_rule(LengthRule::Strict)
    }

    pub fn endpoint_only() -> Self {
        Self::with_rule(LengthRule::EndpointOnly)
    }

    pub fn tolerance(k: u32) -> Self {
        Self::with_rule(LengthRule::Tolerance(k))
    }

    fn with_rule(length: LengthRule) -> Self {
        MatchMode {
            length,
            similarity_threshold: DEFAULT_SIMILARITY_THRESHOLD,
        }
    }
}

impl Default for MatchMode {
    fn default() -> Self {
        Self::strict()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Outcome {
    Benign,
    Suspicious,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MatchReason {
    Exact,
    PartialHostname,
    NoEndpoint,
    LengthMismatch,
}

impl MatchReason {
    pub fn outcome(self) -> Outcome {
        match self {
            MatchReason::Exact | MatchReason::PartialHostname => Outcome::Benign,
            MatchReason::NoEndpoint | MatchReason::LengthMismatch => Outcome::Suspicious,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            MatchReason::Exact => "EXACT",
            MatchReason::PartialHostname => "PARTIAL_HOSTNAME",
            MatchReason::NoEndpoint => "NO_ENDPOINT",
            MatchReason::LengthMismatch => "LENGTH_MISMATCH",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Verdict {
    /// Ordinal of the packet in its input stream.
    pub packet_index: usize,
    pub device_mac: Mac,
    pub entry: ProfileEntry,
    pub outcome: Outcome,
    pub reason: MatchReason,
}

impl Verdict {
    pub fn is_suspicious(&self) -> bool {
        self.outcome == Outcome::Suspicious
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VerdictLine {
    pub idx: usize,
    pub mac: Mac,
    pub endpoint: String,
    pub direction: Direction,
    pub length: u32,
    pub outcome: Outcome,
    pub reason: MatchReason,
}

impl From<&Verdict> for VerdictLine {
    fn from(v: &Verdict) -> Self {
        VerdictLine {
            idx: v.packet_index,
            mac: v.device_mac,
            endpoint: v.entry.external_address.clone(),
            direction: v.entry.direction,
            length: v.entry.length,
            outcome: v.outcome,
            reason: v.reason,
        }
    }
}

impl Verdict {
    /// One JSON Lines record (no trailing newline).
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(&VerdictLine::from(self)).expect("verdict serializes")
    }
}

/// Matches an entry against one device profile.
///
/// Exact key first; then, for hostname endpoints, other keys in the same
/// direction with the same registrable domain and similarity at or above the
/// threshold. Among partial candidates whose lengths also match, the highest
/// similarity wins, ties broken by the smallest key.
pub fn match_entry(
    entry: &ProfileEntry,
    profile: &DeviceProfile,
    mode: &MatchMode,
) -> Result<MatchReason, MonitorError> {
    if entry.device_mac != profile.device_mac {
        return Err(MonitorError::MacMismatch {
            entry: entry.device_mac,
            profile: profile.device_mac,
        });
    }
    Ok(match_parts(
        &entry.external_address,
        entry.direction,
        entry.length,
        profile,
        mode,
    ))
}

fn match_parts(
    external: &str,
    direction: Direction,
    length: u32,
    profile: &DeviceProfile,
    mode: &MatchMode,
) -> MatchReason {
    let mut endpoint_hit = false;
    if let Some(lengths) = profile.lengths(external, direction) {
        if mode.length.accepts(lengths, length) {
            return MatchReason::Exact;
        }
        endpoint_hit = true;
    }

    if !is_ip_literal(external) {
        let domain = registrable_domain(external);
        let mut best: Option<(f64, &str)> = None;
        for (key, lengths) in profile.endpoints(direction) {
            if key == external || is_ip_literal(key) || registrable_domain(key) != domain {
                continue;
            }
            let sim = name_similarity(external, key);
            if sim < mode.similarity_threshold {
                continue;
            }
            endpoint_hit = true;
            if !mode.length.accepts(lengths, length) {
                continue;
            }
            let better = match best {
                None => true,
                Some((best_sim, best_key)) => sim > best_sim || (sim == best_sim && key < best_key),
            };
            if better {
                best = Some((sim, key));
            }
        }
        if best.is_some() {
            return MatchReason::PartialHostname;
        }
    }

    if endpoint_hit {
        MatchReason::LengthMismatch
    } else {
        MatchReason::NoEndpoint
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct MonitorStats {
    pub packets: usize,
    pub verdicts: usize,
    pub suspicious: usize,
    pub skipped: usize,
    pub errors: usize,
    pub checkpoints: usize,
    pub by_reason: BTreeMap<MatchReason, usize>,
}

/// Streaming classifier. Keeps a live copy of the profiles that learned
/// entries are added to immediately; learned entries reach the shared store
/// at the next checkpoint, when the monitored list and profiles are also
/// re-read from it.
pub struct Monitor {
    cfg: NetworkConfig,
    hostnames: HostnameMap,
    store: Arc<ProfileStore>,
    profiles: ProfileSet,
    mode: MatchMode,
    pending: Vec<ProfileEntry>,
    since_checkpoint: usize,
    next_index: usize,
    stats: MonitorStats,
}

impl Monitor {
    pub fn new(
        cfg: NetworkConfig,
        hostnames: HostnameMap,
        store: Arc<ProfileStore>,
        mode: MatchMode,
    ) -> Self {
        let mut cfg = cfg;
        cfg.monitored_macs = store.monitored_macs();
        let profiles = store.snapshot();
        Monitor {
            cfg,
            hostnames,
            store,
            profiles,
            mode,
            pending: Vec::new(),
            since_checkpoint: 0,
            next_index: 0,
            stats: MonitorStats::default(),
        }
    }

    /// Standalone monitor over a fixed profile set.
    pub fn from_profiles(
        cfg: &NetworkConfig,
        hostnames: HostnameMap,
        profiles: ProfileSet,
        mode: MatchMode,
    ) -> Self {
        let store = ProfileStore::with_profiles(profiles, cfg.monitored_macs.iter().copied());
        Monitor::new(cfg.clone(), hostnames, Arc::new(store), mode)
    }

    pub fn mode(&self) -> &MatchMode {
        &self.mode
    }

    pub fn profiles(&self) -> &ProfileSet {
        &self.profiles
    }

    pub fn hostnames(&self) -> &HostnameMap {
        &self.hostnames
    }

    pub fn stats(&self) -> &MonitorStats {
        &self.stats
    }

    pub fn store(&self) -> &Arc<ProfileStore> {
        &self.store
    }

    /// Classifies the next packet in the stream. `Ok(None)` for config
    /// traffic and packets with no monitored endpoint.
    pub fn observe(&mut self, record: &PacketRecord) -> Result<Option<Verdict>, ProfileError> {
        let index = self.next_index;
        self.next_index += 1;
        self.stats.packets += 1;
        if let Some(resp) = &record.dns {
            self.hostnames.learn(resp);
        }
        let result = self.classify(index, record);
        match &result {
            Ok(Some(v)) => {
                self.stats.verdicts += 1;
                if v.is_suspicious() {
                    self.stats.suspicious += 1;
                }
                *self.stats.by_reason.entry(v.reason).or_default() += 1;
            }
            Ok(None) => self.stats.skipped += 1,
            Err(_) => self.stats.errors += 1,
        }
        self.since_checkpoint += 1;
        if self.since_checkpoint >= self.cfg.checkpoint_interval {
            self.checkpoint();
        }
        result
    }

    fn classify(
        &self,
        index: usize,
        record: &PacketRecord,
    ) -> Result<Option<Verdict>, ProfileError> {
        let Some(entry) = build_entry(record, &self.cfg, &self.hostnames)? else {
            return Ok(None);
        };
        let reason = match self.profiles.get(&entry.device_mac) {
            Some(profile) => match_parts(
                &entry.external_address,
                entry.direction,
                entry.length,
                profile,
                &self.mode,
            ),
            None => MatchReason::NoEndpoint,
        };
        Ok(Some(Verdict {
            packet_index: index,
            device_mac: entry.device_mac,
            entry,
            outcome: reason.outcome(),
            reason,
        }))
    }

    /// Whitelists an entry immediately; returns false if it was already known.
    pub fn learn(&mut self, entry: &ProfileEntry) -> bool {
        let name = self.cfg.device_name(&entry.device_mac).to_string();
        let added = self
            .profiles
            .entry(entry.device_mac)
            .or_insert_with(|| DeviceProfile::new(entry.device_mac, name))
            .insert(entry);
        if added {
            self.pending.push(entry.clone());
        }
        added
    }

    pub fn checkpoint(&mut self) {
        self.store
            .merge_entries(&self.pending, &self.cfg.device_names);
        self.pending.clear();
        self.since_checkpoint = 0;
        self.cfg.monitored_macs = self.store.monitored_macs();
        self.profiles = self.store.snapshot();
        self.stats.checkpoints += 1;
    }

    /// Flushes learned entries and returns the live profiles.
    pub fn finish(mut self) -> (ProfileSet, HostnameMap, MonitorStats) {
        self.checkpoint();
        (self.profiles, self.hostnames, self.stats)
    }
}

/// Classifies a whole stream with the feedback loop disabled.
pub fn monitor_stream(
    records: &[PacketRecord],
    cfg: &NetworkConfig,
    map: &HostnameMap,
    profiles: &ProfileSet,
    mode: &MatchMode,
) -> Vec<Verdict> {
    let mut monitor = Monitor::from_profiles(cfg, map.clone(), profiles.clone(), *mode);
    records
        .iter()
        .filter_map(|rec| match monitor.observe(rec) {
            Ok(v) => v,
            Err(e) => {
                log::debug!("no verdict: {e}");
                None
            }
        })
        .collect()
}
