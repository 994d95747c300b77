//! Feedback loop between the monitor and device attestation.
//!
//! Every SUSPICIOUS verdict spends a token from the device's attestation
//! budget and sends a fresh challenge to the device's agent. A verified
//! HEALTHY report whitelists the triggering entry; an INFECTED report, or
//! any failure to obtain a verified report, raises an alert.
//!
//! Attestations run on one worker thread per device, so classification of
//! later packets continues while a report is outstanding. Packets whose entry
//! is already awaiting a report are coalesced into that attestation.

mod limiter;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Serialize;

use crate::attestation::{
    AttestationChannel, AttestationReport, AttestationRequest, Challenge, DevicePublicKey,
    DeviceState, TransportError, Verifier, VerifyError, DEFAULT_DEADLINE_MICROS,
};
use crate::monitoring::{MatchMode, Monitor, Outcome, Verdict};
use crate::packet::{Mac, PacketRecord};
use crate::profiling::{train, HostnameMap, NetworkConfig, ProfileEntry, ProfileSet, ProfileStore};
use crate::report::LatencySummary;

pub use limiter::{RateLimiter, DEFAULT_CAPACITY, DEFAULT_INTERVAL_MICROS};

#[derive(Debug, Clone)]
pub struct OrchestratorConfig {
    pub capacity: u32,
    pub refill_interval_micros: u64,
    /// How long a report may take to arrive.
    pub deadline: Duration,
    /// Attest every device on this period regardless of traffic. Off by default.
    pub periodic_interval_micros: Option<u64>,
    /// Wait for each attestation before classifying the next packet.
    pub blocking: bool,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            capacity: DEFAULT_CAPACITY,
            refill_interval_micros: DEFAULT_INTERVAL_MICROS,
            deadline: Duration::from_micros(DEFAULT_DEADLINE_MICROS),
            periodic_interval_micros: None,
            blocking: false,
        }
    }
}

/// Why attestation could not vouch for a device.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Failure {
    Verify(VerifyError),
    Transport(String),
    NoAgent,
}

impl Failure {
    pub fn code(&self) -> &'static str {
        match self {
            Failure::Verify(VerifyError::BadSignature) => "BAD_SIGNATURE",
            Failure::Verify(VerifyError::StaleChallenge) => "STALE_CHALLENGE",
            Failure::Verify(VerifyError::Timeout) => "TIMEOUT",
            Failure::Verify(VerifyError::InconsistentReport) => "INCONSISTENT_REPORT",
            Failure::Transport(_) => "TRANSPORT",
            Failure::NoAgent => "NO_AGENT",
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Verify(e) => write!(f, "{e}"),
            Failure::Transport(e) => write!(f, "transport error: {e}"),
            Failure::NoAgent => f.write_str("no attestation agent registered"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AlertCause {
    Infected(AttestationReport),
    AttestationFailed(Failure),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alert {
    pub device_mac: Mac,
    /// `None` for periodic attestations.
    pub trigger_entry: Option<ProfileEntry>,
    pub packet_index: Option<usize>,
    pub cause: AlertCause,
    /// Microseconds, on the packet clock.
    pub emitted_at: u64,
}

#[derive(Serialize)]
struct AlertDivergenceLine<'a> {
    path: &'a str,
    kind: crate::attestation::DivergenceKind,
    observed_digest: String,
}

#[derive(Serialize)]
struct AlertLine<'a> {
    mac: Mac,
    emitted_at: u64,
    packet_index: Option<usize>,
    endpoint: Option<&'a str>,
    direction: Option<crate::profiling::Direction>,
    length: Option<u32>,
    cause: &'static str,
    detail: String,
    divergences: Vec<AlertDivergenceLine<'a>>,
}

impl Alert {
    pub fn report(&self) -> Option<&AttestationReport> {
        match &self.cause {
            AlertCause::Infected(r) => Some(r),
            AlertCause::AttestationFailed(_) => None,
        }
    }

    pub fn to_json_line(&self) -> String {
        let (cause, detail, divergences) = match &self.cause {
            AlertCause::Infected(r) => (
                "INFECTED",
                format!("{} divergent processes", r.divergences.len()),
                r.divergences
                    .iter()
                    .map(|d| AlertDivergenceLine {
                        path: &d.path,
                        kind: d.kind,
                        observed_digest: d.observed_digest.map(hex::encode).unwrap_or_default(),
                    })
                    .collect(),
            ),
            AlertCause::AttestationFailed(f) => (f.code(), f.to_string(), Vec::new()),
        };
        let e = self.trigger_entry.as_ref();
        serde_json::to_string(&AlertLine {
            mac: self.device_mac,
            emitted_at: self.emitted_at,
            packet_index: self.packet_index,
            endpoint: e.map(|e| e.external_address.as_str()),
            direction: e.map(|e| e.direction),
            length: e.map(|e| e.length),
            cause,
            detail,
            divergences,
        })
        .expect("alert serializes")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Action {
    Pass,
    /// Over the device's attestation budget; logged only.
    Deferred,
    /// The same entry is already awaiting a report.
    Coalesced,
    Dispatched(Challenge),
    Learned(ProfileEntry),
    Alert(Alert),
    /// A periodic attestation came back healthy.
    Healthy(Mac),
}

/// An agent the orchestrator can attest.
pub struct AgentEndpoint {
    pub mac: Mac,
    pub public_key: DevicePublicKey,
    pub channel: Box<dyn AttestationChannel + Send>,
}

impl AgentEndpoint {
    pub fn new(
        mac: Mac,
        public_key: DevicePublicKey,
        channel: impl AttestationChannel + Send + 'static,
    ) -> Self {
        AgentEndpoint {
            mac,
            public_key,
            channel: Box::new(channel),
        }
    }
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct PipelineMetrics {
    pub packets: usize,
    pub verdicts: usize,
    pub benign: usize,
    pub suspicious: usize,
    pub skipped: usize,
    pub packet_errors: usize,
    pub by_reason: BTreeMap<String, usize>,
    pub attestations: usize,
    pub periodic_attestations: usize,
    pub attestations_per_device: BTreeMap<String, usize>,
    pub learned: usize,
    pub alerts: usize,
    pub deferred: usize,
    pub coalesced: usize,
    pub attestation_failures: usize,
    pub checkpoints: usize,
    pub classify_latency: LatencySummary,
    pub attest_latency: LatencySummary,
}

struct Done {
    request: AttestationRequest,
    result: Result<AttestationReport, TransportError>,
    finished: Instant,
}

struct InFlight {
    request: AttestationRequest,
    trigger: Option<Verdict>,
    dispatched: Instant,
}

type AlertSink = Box<dyn FnMut(&Alert) + Send>;

pub struct Orchestrator {
    monitor: Monitor,
    verifier: Verifier,
    limiter: RateLimiter,
    config: OrchestratorConfig,
    workers: HashMap<Mac, Sender<AttestationRequest>>,
    done_tx: Sender<Done>,
    done_rx: Receiver<Done>,
    in_flight: HashMap<Challenge, InFlight>,
    awaiting: HashSet<ProfileEntry>,
    next_periodic: HashMap<Mac, u64>,
    alerts: Vec<Alert>,
    learned: Vec<ProfileEntry>,
    verdicts: Vec<Verdict>,
    classify_times: Vec<Duration>,
    attest_times: Vec<Duration>,
    metrics: PipelineMetrics,
    alert_sink: Option<AlertSink>,
}

impl Orchestrator {
    pub fn new(monitor: Monitor, verifier: Verifier, config: OrchestratorConfig) -> Self {
        let (done_tx, done_rx) = mpsc::channel();
        let verifier = verifier.with_deadline(config.deadline.as_micros() as u64);
        Orchestrator {
            monitor,
            verifier,
            limiter: RateLimiter::new(config.capacity, config.refill_interval_micros),
            config,
            workers: HashMap::new(),
            done_tx,
            done_rx,
            in_flight: HashMap::new(),
            awaiting: HashSet::new(),
            next_periodic: HashMap::new(),
            alerts: Vec::new(),
            learned: Vec::new(),
            verdicts: Vec::new(),
            classify_times: Vec::new(),
            attest_times: Vec::new(),
            metrics: PipelineMetrics::default(),
            alert_sink: None,
        }
    }

    /// Called for every alert as soon as it is raised.
    pub fn set_alert_sink(&mut self, sink: impl FnMut(&Alert) + Send + 'static) {
        self.alert_sink = Some(Box::new(sink));
    }

    /// Registers the device key and starts the device's attestation worker.
    pub fn register_agent(&mut self, endpoint: AgentEndpoint) {
        let AgentEndpoint {
            mac,
            public_key,
            mut channel,
        } = endpoint;
        self.verifier.register(mac, public_key);
        let (tx, rx) = mpsc::channel::<AttestationRequest>();
        let done = self.done_tx.clone();
        std::thread::Builder::new()
            .name(format!("attest-{mac}"))
            .spawn(move || {
                for request in rx {
                    let result = channel.attest(&request);
                    let finished = Instant::now();
                    if done
                        .send(Done {
                            request,
                            result,
                            finished,
                        })
                        .is_err()
                    {
                        break;
                    }
                }
            })
            .expect("spawn attestation worker");
        self.workers.insert(mac, tx);
    }

    pub fn monitor(&self) -> &Monitor {
        &self.monitor
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn learned(&self) -> &[ProfileEntry] {
        &self.learned
    }

    pub fn metrics(&self) -> &PipelineMetrics {
        &self.metrics
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    /// Classifies one packet and acts on its verdict. The verdict is returned
    /// before any attestation it triggers has completed, unless the
    /// orchestrator is configured as blocking.
    pub fn process(&mut self, record: &PacketRecord) -> Option<Verdict> {
        let now = record.timestamp_micros();
        let start = Instant::now();
        let result = self.monitor.observe(record);
        self.classify_times.push(start.elapsed());
        self.metrics.packets += 1;
        let verdict = match result {
            Ok(v) => v,
            Err(e) => {
                log::debug!("packet skipped: {e}");
                self.metrics.packet_errors += 1;
                None
            }
        };
        if let Some(v) = &verdict {
            self.verdicts.push(v.clone());
            if self.config.blocking {
                self.handle_verdict(v, now);
            } else {
                self.submit(v, now);
            }
        }
        self.periodic(now);
        self.poll();
        verdict
    }

    /// Acts on a verdict and waits for the outcome of any attestation it
    /// triggers.
    pub fn handle_verdict(&mut self, verdict: &Verdict, now: u64) -> Action {
        match self.submit(verdict, now) {
            Action::Dispatched(challenge) => self.wait_for(challenge),
            other => other,
        }
    }

    /// Acts on a verdict without waiting for attestation.
    pub fn submit(&mut self, verdict: &Verdict, now: u64) -> Action {
        self.count_verdict(verdict);
        if verdict.outcome == Outcome::Benign {
            return Action::Pass;
        }
        if self.awaiting.contains(&verdict.entry) {
            self.metrics.coalesced += 1;
            return Action::Coalesced;
        }
        let mac = verdict.device_mac;
        if !self.limiter.try_acquire(&mac, now) {
            self.metrics.deferred += 1;
            log::info!(
                "attestation of {mac} deferred: budget spent ({} -> {} len {})",
                verdict.entry.direction,
                verdict.entry.external_address,
                verdict.entry.length
            );
            return Action::Deferred;
        }
        if !self.workers.contains_key(&mac) {
            let alert = self.raise(
                mac,
                Some(verdict),
                AlertCause::AttestationFailed(Failure::NoAgent),
                now,
            );
            return Action::Alert(alert);
        }
        self.awaiting.insert(verdict.entry.clone());
        self.dispatch(mac, Some(verdict.clone()), now)
    }

    fn count_verdict(&mut self, v: &Verdict) {
        self.metrics.verdicts += 1;
        match v.outcome {
            Outcome::Benign => self.metrics.benign += 1,
            Outcome::Suspicious => self.metrics.suspicious += 1,
        }
        *self
            .metrics
            .by_reason
            .entry(v.reason.as_str().to_string())
            .or_default() += 1;
    }

    fn dispatch(&mut self, mac: Mac, trigger: Option<Verdict>, now: u64) -> Action {
        let request = self.verifier.issue(mac, now);
        let challenge = request.challenge;
        if trigger.is_some() {
            self.metrics.attestations += 1;
        } else {
            self.metrics.periodic_attestations += 1;
        }
        *self
            .metrics
            .attestations_per_device
            .entry(mac.to_string())
            .or_default() += 1;
        self.in_flight.insert(
            challenge,
            InFlight {
                request: request.clone(),
                trigger,
                dispatched: Instant::now(),
            },
        );
        let sent = self
            .workers
            .get(&mac)
            .is_some_and(|w| w.send(request).is_ok());
        if !sent {
            let failed = Done {
                request: self.in_flight[&challenge].request.clone(),
                result: Err(TransportError::Closed),
                finished: Instant::now(),
            };
            return self.apply(failed).map(|(_, a)| a).unwrap_or(Action::Pass);
        }
        Action::Dispatched(challenge)
    }

    fn periodic(&mut self, now: u64) {
        let Some(interval) = self.config.periodic_interval_micros else {
            return;
        };
        let mut macs: Vec<Mac> = self.workers.keys().copied().collect();
        macs.sort();
        for mac in macs {
            let due = *self.next_periodic.entry(mac).or_insert(now + interval);
            if now >= due {
                self.next_periodic.insert(mac, now + interval);
                self.dispatch(mac, None, now);
            }
        }
    }

    fn raise(&mut self, mac: Mac, trigger: Option<&Verdict>, cause: AlertCause, at: u64) -> Alert {
        let alert = Alert {
            device_mac: mac,
            trigger_entry: trigger.map(|v| v.entry.clone()),
            packet_index: trigger.map(|v| v.packet_index),
            cause,
            emitted_at: at,
        };
        if let AlertCause::AttestationFailed(_) = alert.cause {
            self.metrics.attestation_failures += 1;
        }
        log::warn!("ALERT {}", alert.to_json_line());
        self.metrics.alerts += 1;
        if let Some(sink) = self.alert_sink.as_mut() {
            sink(&alert);
        }
        self.alerts.push(alert.clone());
        alert
    }

    /// Applies a finished attestation. `None` if it had already expired.
    fn apply(&mut self, done: Done) -> Option<(Challenge, Action)> {
        let challenge = done.request.challenge;
        let job = self.in_flight.remove(&challenge)?;
        if let Some(v) = &job.trigger {
            self.awaiting.remove(&v.entry);
        }
        let elapsed = done.finished.saturating_duration_since(job.dispatched);
        self.attest_times.push(elapsed);
        let mac = job.request.device_mac;
        let now = job.request.issued_at + elapsed.as_micros() as u64;
        let checked = match done.result {
            Err(TransportError::Timeout) => Err(Failure::Verify(VerifyError::Timeout)),
            Err(e) => Err(Failure::Transport(e.to_string())),
            Ok(report) => self
                .verifier
                .verify(&report, &job.request, now)
                .map(|()| report)
                .map_err(Failure::Verify),
        };
        self.verifier.expire(&job.request);
        let action = match checked {
            Err(failure) => Action::Alert(self.raise(
                mac,
                job.trigger.as_ref(),
                AlertCause::AttestationFailed(failure),
                now,
            )),
            Ok(report) if report.verdict == DeviceState::Infected => Action::Alert(self.raise(
                mac,
                job.trigger.as_ref(),
                AlertCause::Infected(report),
                now,
            )),
            Ok(_) => match job.trigger {
                Some(v) => {
                    if self.monitor.learn(&v.entry) {
                        self.metrics.learned += 1;
                        self.learned.push(v.entry.clone());
                    }
                    Action::Learned(v.entry)
                }
                None => Action::Healthy(mac),
            },
        };
        Some((challenge, action))
    }

    fn expire_overdue(&mut self) -> Vec<(Challenge, Action)> {
        let deadline = self.config.deadline;
        let mut overdue: Vec<Challenge> = self
            .in_flight
            .iter()
            .filter(|(_, j)| j.dispatched.elapsed() > deadline)
            .map(|(c, _)| *c)
            .collect();
        overdue.sort();
        overdue
            .into_iter()
            .filter_map(|c| {
                let request = self.in_flight[&c].request.clone();
                self.apply(Done {
                    request,
                    result: Err(TransportError::Timeout),
                    finished: Instant::now(),
                })
            })
            .collect()
    }

    /// Applies every attestation that has finished, without blocking.
    pub fn poll(&mut self) -> Vec<Action> {
        let mut out = Vec::new();
        while let Ok(done) = self.done_rx.try_recv() {
            out.extend(self.apply(done).map(|(_, a)| a));
        }
        out.extend(self.expire_overdue().into_iter().map(|(_, a)| a));
        out
    }

    fn wait_for(&mut self, challenge: Challenge) -> Action {
        loop {
            let Some(job) = self.in_flight.get(&challenge) else {
                return Action::Pass;
            };
            let remaining = self
                .config
                .deadline
                .saturating_sub(job.dispatched.elapsed());
            match self.done_rx.recv_timeout(remaining) {
                Ok(done) => {
                    if let Some((c, action)) = self.apply(done) {
                        if c == challenge {
                            return action;
                        }
                    }
                }
                Err(RecvTimeoutError::Timeout) | Err(RecvTimeoutError::Disconnected) => {
                    for (c, action) in self.expire_overdue() {
                        if c == challenge {
                            return action;
                        }
                    }
                }
            }
        }
    }

    /// Blocks until every outstanding attestation has finished or expired.
    pub fn wait_all(&mut self) -> Vec<Action> {
        let mut out = Vec::new();
        let mut pending: Vec<Challenge> = self.in_flight.keys().copied().collect();
        pending.sort();
        for c in pending {
            if self.in_flight.contains_key(&c) {
                out.push(self.wait_for(c));
            }
        }
        out
    }

    /// Drains attestations, checkpoints learned entries into the store and
    /// returns everything the run produced.
    pub fn finish(mut self) -> PipelineOutcome {
        self.wait_all();
        self.workers.clear();
        let Orchestrator {
            monitor,
            alerts,
            learned,
            verdicts,
            mut classify_times,
            mut attest_times,
            mut metrics,
            ..
        } = self;
        let (profiles, hostnames, stats) = monitor.finish();
        metrics.skipped = stats.skipped;
        metrics.checkpoints = stats.checkpoints;
        metrics.classify_latency = LatencySummary::from_durations(&mut classify_times);
        metrics.attest_latency = LatencySummary::from_durations(&mut attest_times);
        PipelineOutcome {
            verdicts,
            alerts,
            learned,
            profiles,
            hostnames,
            metrics,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutcome {
    pub verdicts: Vec<Verdict>,
    pub alerts: Vec<Alert>,
    pub learned: Vec<ProfileEntry>,
    pub profiles: ProfileSet,
    pub hostnames: HostnameMap,
    pub metrics: PipelineMetrics,
}

/// Where the profiles for a run come from.
pub enum ProfileSource<'a> {
    Trained(ProfileSet, HostnameMap),
    Train(&'a [PacketRecord]),
}

/// Trains if needed, then monitors `records` with the feedback loop inline.
pub fn run_pipeline(
    source: ProfileSource<'_>,
    records: &[PacketRecord],
    cfg: &NetworkConfig,
    mode: MatchMode,
    agents: Vec<AgentEndpoint>,
    config: OrchestratorConfig,
) -> PipelineOutcome {
    let (profiles, hostnames) = match source {
        ProfileSource::Trained(p, h) => (p, h),
        ProfileSource::Train(training) => {
            let t = train(training, cfg, &HostnameMap::new());
            (t.profiles, t.hostnames)
        }
    };
    let store = Arc::new(ProfileStore::with_profiles(
        profiles,
        cfg.monitored_macs.iter().copied(),
    ));
    let monitor = Monitor::new(cfg.clone(), hostnames, store, mode);
    let mut orch = Orchestrator::new(monitor, Verifier::new(), config);
    for agent in agents {
        orch.register_agent(agent);
    }
    for rec in records {
        orch.process(rec);
    }
    orch.finish()
}
