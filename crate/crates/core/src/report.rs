//! Post-processing: detection rates, profile size accounting, periodic
//! attestation energy, length histograms and classification latency.

use std::collections::{BTreeMap, HashSet};
use std::io::Write;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::monitoring::{monitor_stream, MatchMode, Monitor, Verdict};
use crate::packet::{Mac, PacketRecord};
use crate::profiling::{HostnameMap, NetworkConfig, ProfileEntry, ProfileSet};
use crate::trace::Label;

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("TPR needs ground-truth labels")]
    NoLabels,
    #[error("{labels} labels for {records} packets")]
    LabelMismatch { labels: usize, records: usize },
    #[error("empty trace")]
    EmptyTrace,
    #[error("invalid energy model: {0}")]
    InvalidModel(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Wall-clock distribution in milliseconds.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct LatencySummary {
    pub count: usize,
    pub mean_ms: f64,
    pub median_ms: f64,
    pub p99_ms: f64,
    pub max_ms: f64,
}

impl LatencySummary {
    /// Sorts `samples` in place. Median averages the two middle samples;
    /// p99 is nearest-rank.
    pub fn from_durations(samples: &mut [Duration]) -> Self {
        if samples.is_empty() {
            return Self::default();
        }
        samples.sort_unstable();
        let ms = |d: Duration| d.as_secs_f64() * 1e3;
        let n = samples.len();
        let median = if n % 2 == 1 {
            ms(samples[n / 2])
        } else {
            (ms(samples[n / 2 - 1]) + ms(samples[n / 2])) / 2.0
        };
        let rank = ((0.99 * n as f64).ceil() as usize).clamp(1, n);
        LatencySummary {
            count: n,
            mean_ms: samples.iter().map(|&d| ms(d)).sum::<f64>() / n as f64,
            median_ms: median,
            p99_ms: ms(samples[rank - 1]),
            max_ms: ms(samples[n - 1]),
        }
    }
}

/// Suspicious/total counts for one device or the whole trace.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct Rates {
    pub benign: usize,
    pub benign_flagged: usize,
    pub malicious: usize,
    pub malicious_flagged: usize,
    pub benign_unique: usize,
    pub benign_unique_flagged: usize,
    #[serde(skip)]
    labelled: bool,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl Rates {
    /// Every suspicious benign packet counts, duplicates included.
    pub fn fpr(&self) -> f64 {
        ratio(self.benign_flagged, self.benign)
    }

    /// Over distinct benign entries instead of packets.
    pub fn fpr_unique(&self) -> f64 {
        ratio(self.benign_unique_flagged, self.benign_unique)
    }

    /// `Ok(None)` when labels exist but no packet is malicious.
    pub fn tpr(&self) -> Result<Option<f64>, ReportError> {
        if !self.labelled {
            return Err(ReportError::NoLabels);
        }
        Ok((self.malicious > 0).then(|| ratio(self.malicious_flagged, self.malicious)))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RateCounts {
    pub per_device: BTreeMap<Mac, Rates>,
    pub total: Rates,
}

/// Tallies verdicts against labels indexed by packet position. Without
/// labels every verdict is taken as benign. Packets labelled config are
/// ignored.
pub fn compute_rates(verdicts: &[Verdict], labels: Option<&[Label]>) -> RateCounts {
    let mut out = RateCounts::default();
    let mut seen: HashSet<&ProfileEntry> = HashSet::new();
    let mut unique_flagged: HashSet<&ProfileEntry> = HashSet::new();
    for v in verdicts {
        let label = match labels {
            Some(l) => l.get(v.packet_index).copied().unwrap_or(Label::Benign),
            None => Label::Benign,
        };
        let flagged = v.is_suspicious();
        let dev = out.per_device.entry(v.device_mac).or_default();
        for r in [&mut *dev, &mut out.total] {
            match label {
                Label::Config => {}
                Label::Benign => {
                    r.benign += 1;
                    r.benign_flagged += usize::from(flagged);
                }
                Label::Malicious => {
                    r.malicious += 1;
                    r.malicious_flagged += usize::from(flagged);
                }
            }
        }
        if label == Label::Benign {
            if seen.insert(&v.entry) {
                dev.benign_unique += 1;
                out.total.benign_unique += 1;
            }
            if flagged && unique_flagged.insert(&v.entry) {
                dev.benign_unique_flagged += 1;
                out.total.benign_unique_flagged += 1;
            }
        }
    }
    let labelled = labels.is_some();
    out.total.labelled = labelled;
    for r in out.per_device.values_mut() {
        r.labelled = labelled;
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeviceRateRow {
    pub mac: Mac,
    pub device_name: String,
    pub training_packets: usize,
    pub monitoring_packets: usize,
    pub profile_entries: usize,
    pub fpr_strict: f64,
    pub fpr_endpoint_only: f64,
    pub fpr_strict_unique: f64,
    pub fpr_endpoint_only_unique: f64,
    pub tpr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RateReport {
    pub devices: Vec<DeviceRateRow>,
    pub total: DeviceRateRow,
}

fn packets_per_device(records: &[PacketRecord], cfg: &NetworkConfig) -> BTreeMap<Mac, usize> {
    let mut out = BTreeMap::new();
    for r in records {
        for mac in [r.src_mac, r.dst_mac] {
            if cfg.is_monitored(&mac) {
                *out.entry(mac).or_default() += 1;
            }
        }
    }
    out
}

/// Monitors `monitoring` against `profiles` twice, in strict and
/// endpoint-only mode, with the feedback loop disabled.
pub fn rate_report(
    training: &[PacketRecord],
    monitoring: &[PacketRecord],
    labels: Option<&[Label]>,
    cfg: &NetworkConfig,
    hostnames: &HostnameMap,
    profiles: &ProfileSet,
) -> Result<RateReport, ReportError> {
    if let Some(l) = labels {
        if l.len() != monitoring.len() {
            return Err(ReportError::LabelMismatch {
                labels: l.len(),
                records: monitoring.len(),
            });
        }
    }
    let strict = monitor_stream(monitoring, cfg, hostnames, profiles, &MatchMode::strict());
    let endpoint = monitor_stream(
        monitoring,
        cfg,
        hostnames,
        profiles,
        &MatchMode::endpoint_only(),
    );
    let s = compute_rates(&strict, labels);
    let e = compute_rates(&endpoint, labels);
    let train_counts = packets_per_device(training, cfg);
    let mon_counts = packets_per_device(monitoring, cfg);

    let row = |mac: Option<Mac>, rs: &Rates, re: &Rates| -> DeviceRateRow {
        let (name, training_packets, monitoring_packets, profile_entries) = match mac {
            Some(m) => (
                cfg.device_name(&m).to_string(),
                train_counts.get(&m).copied().unwrap_or(0),
                mon_counts.get(&m).copied().unwrap_or(0),
                profiles.get(&m).map_or(0, |p| p.entry_count()),
            ),
            None => (
                "TOTAL".to_string(),
                train_counts.values().sum(),
                mon_counts.values().sum(),
                profiles.values().map(|p| p.entry_count()).sum(),
            ),
        };
        DeviceRateRow {
            mac: mac.unwrap_or_default(),
            device_name: name,
            training_packets,
            monitoring_packets,
            profile_entries,
            fpr_strict: rs.fpr(),
            fpr_endpoint_only: re.fpr(),
            fpr_strict_unique: rs.fpr_unique(),
            fpr_endpoint_only_unique: re.fpr_unique(),
            tpr: rs.tpr().ok().flatten(),
        }
    };
    let empty = Rates::default();
    let devices = cfg
        .monitored_macs
        .iter()
        .map(|m| {
            row(
                Some(*m),
                s.per_device.get(m).unwrap_or(&empty),
                e.per_device.get(m).unwrap_or(&empty),
            )
        })
        .collect();
    Ok(RateReport {
        devices,
        total: row(None, &s.total, &e.total),
    })
}

pub fn write_rates_csv<W: Write>(
    report: &RateReport,
    mut out: W,
    dedup: bool,
) -> std::io::Result<()> {
    write!(
        out,
        "MAC,DEVICE NAME,TRAINING PACKETS,MONITORING PACKETS,PROFILE ENTRIES,FPR STRICT,FPR ENDPOINT"
    )?;
    if dedup {
        write!(out, ",UNIQUE FPR STRICT,UNIQUE FPR ENDPOINT")?;
    }
    writeln!(out, ",TPR")?;
    for r in report.devices.iter().chain(std::iter::once(&report.total)) {
        let mac = if r.device_name == "TOTAL" && r.mac == Mac::default() {
            String::new()
        } else {
            r.mac.to_string()
        };
        let name = if r.device_name.contains([',', '"']) {
            format!("\"{}\"", r.device_name.replace('"', "\"\""))
        } else {
            r.device_name.clone()
        };
        write!(
            out,
            "{mac},{name},{},{},{},{:.4},{:.4}",
            r.training_packets,
            r.monitoring_packets,
            r.profile_entries,
            r.fpr_strict,
            r.fpr_endpoint_only
        )?;
        if dedup {
            write!(
                out,
                ",{:.4},{:.4}",
                r.fpr_strict_unique, r.fpr_endpoint_only_unique
            )?;
        }
        match r.tpr {
            Some(t) => writeln!(out, ",{t:.4}")?,
            None => writeln!(out, ",")?,
        }
    }
    out.flush()
}

/// Profile size against the `devices x endpoints x lengths` bound.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StorageBound {
    pub n_actual: usize,
    pub d: usize,
    /// Mean distinct (direction, endpoint) pairs per device.
    pub e_avg: f64,
    /// Mean over devices of the device's mean distinct lengths per pair.
    pub l_avg: f64,
    /// `d * e_avg * l_avg`; reported for comparison only.
    pub n_bound: f64,
    pub e_max: usize,
    pub l_max: usize,
    /// `d * e_max * l_max`, which always holds.
    pub n_hard_bound: usize,
}

impl StorageBound {
    /// Bound from published aggregates, where only averages are known.
    pub fn from_aggregates(n_actual: usize, d: usize, e: f64, l: f64) -> Self {
        StorageBound {
            n_actual,
            d,
            e_avg: e,
            l_avg: l,
            n_bound: d as f64 * e * l,
            e_max: e.ceil() as usize,
            l_max: l.ceil() as usize,
            n_hard_bound: d * e.ceil() as usize * l.ceil() as usize,
        }
    }

    pub fn holds(&self) -> bool {
        self.n_actual as f64 <= self.n_bound
    }
}

pub fn storage_bound(profiles: &ProfileSet) -> StorageBound {
    let mut n_actual = 0;
    let (mut e_sum, mut l_sum) = (0.0, 0.0);
    let (mut e_max, mut l_max) = (0, 0);
    let mut d = 0;
    for p in profiles.values() {
        d += 1;
        let pairs = p.endpoint_count();
        let entries = p.entry_count();
        n_actual += entries;
        e_sum += pairs as f64;
        e_max = e_max.max(pairs);
        if pairs > 0 {
            l_sum += entries as f64 / pairs as f64;
        }
        for dir in crate::profiling::Direction::ALL {
            for (_, lengths) in p.endpoints(dir) {
                l_max = l_max.max(lengths.len());
            }
        }
    }
    if d == 0 {
        return StorageBound {
            n_actual: 0,
            d: 0,
            e_avg: 0.0,
            l_avg: 0.0,
            n_bound: 0.0,
            e_max: 0,
            l_max: 0,
            n_hard_bound: 0,
        };
    }
    let e_avg = e_sum / d as f64;
    let l_avg = l_sum / d as f64;
    StorageBound {
        n_actual,
        d,
        e_avg,
        l_avg,
        n_bound: d as f64 * e_avg * l_avg,
        e_max,
        l_max,
        n_hard_bound: d * e_max * l_max,
    }
}

pub const YEAR_SECS: u64 = 365 * 24 * 3600;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyModel {
    pub per_attestation_mwh: f64,
    pub horizon_secs: u64,
}

impl EnergyModel {
    pub fn new(per_attestation_mwh: f64, horizon_secs: u64) -> Result<Self, ReportError> {
        if !(per_attestation_mwh.is_finite() && per_attestation_mwh > 0.0) {
            return Err(ReportError::InvalidModel(format!(
                "per-attestation energy must be positive, got {per_attestation_mwh}"
            )));
        }
        if horizon_secs == 0 {
            return Err(ReportError::InvalidModel("horizon must be positive".into()));
        }
        Ok(EnergyModel {
            per_attestation_mwh,
            horizon_secs,
        })
    }

    pub fn yearly(per_attestation_mwh: f64) -> Result<Self, ReportError> {
        Self::new(per_attestation_mwh, YEAR_SECS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EnergyRow {
    pub interval_secs: u64,
    pub attestations: u64,
    pub energy_mwh: f64,
}

/// `energy = per_attestation * floor(horizon / interval)` for each interval.
pub fn energy_projection(
    model: &EnergyModel,
    intervals_secs: &[u64],
) -> Result<Vec<EnergyRow>, ReportError> {
    intervals_secs
        .iter()
        .map(|&interval| {
            if interval == 0 {
                return Err(ReportError::InvalidModel(
                    "interval must be positive".into(),
                ));
            }
            let attestations = model.horizon_secs / interval;
            Ok(EnergyRow {
                interval_secs: interval,
                attestations,
                energy_mwh: model.per_attestation_mwh * attestations as f64,
            })
        })
        .collect()
}

pub type LengthHistogram = BTreeMap<Label, BTreeMap<u32, usize>>;

/// Frame-length counts per label; config packets are left out.
pub fn length_histogram(
    records: &[PacketRecord],
    labels: &[Label],
) -> Result<LengthHistogram, ReportError> {
    if labels.len() != records.len() {
        return Err(ReportError::LabelMismatch {
            labels: labels.len(),
            records: records.len(),
        });
    }
    let mut out = LengthHistogram::new();
    for (rec, &label) in records.iter().zip(labels) {
        if label == Label::Config {
            continue;
        }
        *out.entry(label)
            .or_default()
            .entry(rec.frame_len)
            .or_default() += 1;
    }
    Ok(out)
}

pub fn write_histogram_csv<W: Write>(hist: &LengthHistogram, mut out: W) -> std::io::Result<()> {
    writeln!(out, "CLASS,LENGTH,COUNT")?;
    for (label, counts) in hist {
        for (len, n) in counts {
            writeln!(out, "{},{len},{n}", label.as_str())?;
        }
    }
    out.flush()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LatencyReport {
    pub packets: usize,
    pub profile_entries: usize,
    pub mode: String,
    pub latency: LatencySummary,
    pub machine: String,
}

pub fn machine_description() -> String {
    let cpus = std::thread::available_parallelism().map_or(1, |n| n.get());
    format!(
        "{}-{} ({cpus} hardware threads)",
        std::env::consts::ARCH,
        std::env::consts::OS
    )
}

/// Per-packet wall-clock time to build the entry and match it against the
/// profiles. Attestation is not involved.
pub fn bench_latency(
    records: &[PacketRecord],
    cfg: &NetworkConfig,
    hostnames: &HostnameMap,
    profiles: &ProfileSet,
    mode: &MatchMode,
) -> Result<LatencyReport, ReportError> {
    if records.is_empty() {
        return Err(ReportError::EmptyTrace);
    }
    let mut cfg = cfg.clone();
    cfg.checkpoint_interval = usize::MAX;
    let mut monitor = Monitor::from_profiles(&cfg, hostnames.clone(), profiles.clone(), *mode);
    let mut samples = Vec::with_capacity(records.len());
    for rec in records {
        let start = Instant::now();
        let v = monitor.observe(rec);
        samples.push(start.elapsed());
        std::hint::black_box(v).ok();
    }
    Ok(LatencyReport {
        packets: records.len(),
        profile_entries: profiles.values().map(|p| p.entry_count()).sum(),
        mode: mode.length.to_string(),
        latency: LatencySummary::from_durations(&mut samples),
        machine: machine_description(),
    })
}
