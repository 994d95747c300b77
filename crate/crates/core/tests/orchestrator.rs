use std::net::TcpListener;
use std::sync::mpsc;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use madea::attestation::{
    serve, Agent, AttestationChannel, AttestationReport, AttestationRequest, DeviceKey,
    DivergenceKind, LoopbackChannel, ProcessTable, ReferenceMeasurement, TcpChannel,
    TransportError, UnresponsiveChannel, Verifier, VerifyError,
};
use madea::monitoring::{MatchMode, MatchReason, Monitor, Outcome};
use madea::orchestrator::{
    run_pipeline, Action, AgentEndpoint, AlertCause, Failure, Orchestrator, OrchestratorConfig,
    ProfileSource,
};
use madea::profiling::{train, ProfileStore};
use madea::scenario::{
    case1_healthy_bulb, case2_infected_bulb, desk_corpus, DeskOptions, BULB_IP, BULB_MAC,
    GATEWAY_MAC, INJECTED_BINARY, PHONE_IP,
};
use madea::trace::{generate_trace, Endpoint, FlowSpec, Label, TraceOptions};
use madea::{Direction, HostnameMap, Mac, Transport};

fn orchestrator_for(s: &madea::scenario::BulbScenario, config: OrchestratorConfig) -> Orchestrator {
    let t = train(&s.training.records, &s.cfg, &HostnameMap::new());
    let store = Arc::new(ProfileStore::with_profiles(
        t.profiles,
        s.cfg.monitored_macs.iter().copied(),
    ));
    let monitor = Monitor::new(s.cfg.clone(), t.hostnames, store, MatchMode::strict());
    let mut orch = Orchestrator::new(monitor, Verifier::seeded(1), config);
    orch.register_agent(AgentEndpoint::new(
        BULB_MAC,
        s.public_key,
        LoopbackChannel::new(s.agent.clone()),
    ));
    orch
}

#[test]
fn healthy_bulb_learns_new_status_lengths() {
    let s = case1_healthy_bulb(3);
    let mut orch = orchestrator_for(&s, OrchestratorConfig::default());
    let verdicts: Vec<_> = s
        .monitoring
        .records
        .iter()
        .filter_map(|r| orch.process(r))
        .collect();
    assert_eq!(verdicts.len(), 2);
    assert!(verdicts
        .iter()
        .all(|v| v.reason == MatchReason::LengthMismatch));
    orch.wait_all();
    assert_eq!(orch.metrics().attestations, 2);
    assert!(orch.alerts().is_empty());
    let learned: Vec<(Direction, u32)> = orch
        .learned()
        .iter()
        .map(|e| (e.direction, e.length))
        .collect();
    assert_eq!(
        learned,
        vec![
            (Direction::UserToDevice, 48),
            (Direction::DeviceToUser, 102)
        ]
    );

    // An hour later the same exchange passes without attestation.
    let replay: Vec<_> = s
        .replay
        .records
        .iter()
        .filter_map(|r| orch.process(r))
        .collect();
    assert_eq!(replay.len(), 2);
    assert!(replay.iter().all(|v| v.reason == MatchReason::Exact));
    let out = orch.finish();
    assert_eq!(out.metrics.attestations, 2);
    let p = &out.profiles[&BULB_MAC];
    assert!(p.contains(&PHONE_IP.to_string(), Direction::UserToDevice, 48));
    assert!(p.contains(&PHONE_IP.to_string(), Direction::DeviceToUser, 102));
    assert_eq!(p.entry_count(), 6);
}

#[test]
fn healthy_bulb_through_run_pipeline_blocking() {
    let s = case1_healthy_bulb(4);
    let mut records = s.monitoring.records.clone();
    records.extend(s.replay.records.iter().cloned());
    let out = run_pipeline(
        ProfileSource::Train(&s.training.records),
        &records,
        &s.cfg,
        MatchMode::strict(),
        vec![AgentEndpoint::new(
            BULB_MAC,
            s.public_key,
            LoopbackChannel::new(s.agent.clone()),
        )],
        OrchestratorConfig {
            blocking: true,
            ..OrchestratorConfig::default()
        },
    );
    let outcomes: Vec<Outcome> = out.verdicts.iter().map(|v| v.outcome).collect();
    assert_eq!(
        outcomes,
        vec![
            Outcome::Suspicious,
            Outcome::Suspicious,
            Outcome::Benign,
            Outcome::Benign
        ]
    );
    assert_eq!(out.metrics.attestations, 2);
    assert_eq!(out.learned.len(), 2);
    assert!(out.alerts.is_empty());
}

#[test]
fn infected_bulb_raises_an_alert_naming_the_bot() {
    let s = case2_infected_bulb(5);
    let sink: Arc<Mutex<Vec<String>>> = Arc::default();
    let mut orch = orchestrator_for(&s, OrchestratorConfig::default());
    let lines = Arc::clone(&sink);
    orch.set_alert_sink(move |a| lines.lock().unwrap().push(a.to_json_line()));
    for r in &s.monitoring.records {
        orch.process(r);
    }
    let out = orch.finish();

    let suspicious: Vec<_> = out.verdicts.iter().filter(|v| v.is_suspicious()).collect();
    assert_eq!(suspicious.len(), 5);
    assert!(suspicious
        .iter()
        .all(|v| v.entry.external_address == "198.98.50.97"));
    assert!(out.learned.is_empty());
    assert!(!out.alerts.is_empty());
    for alert in &out.alerts {
        assert_eq!(alert.device_mac, BULB_MAC);
        let report = alert.report().expect("infected report");
        assert_eq!(report.divergences.len(), 1);
        assert_eq!(report.divergences[0].path, INJECTED_BINARY);
        assert_eq!(report.divergences[0].kind, DivergenceKind::NewProcess);
        let trigger = alert.trigger_entry.as_ref().unwrap();
        assert_eq!(trigger.external_address, "198.98.50.97");
    }
    let first = &out.alerts[0];
    assert_eq!(first.trigger_entry.as_ref().unwrap().length, 74);
    assert_eq!(
        first.trigger_entry.as_ref().unwrap().direction,
        Direction::DeviceToServer
    );
    let lines = sink.lock().unwrap();
    assert_eq!(lines.len(), out.alerts.len());
    assert!(lines[0].contains(INJECTED_BINARY));
    let p = &out.profiles[&BULB_MAC];
    assert!(p.endpoints(Direction::DeviceToServer).next().is_none());
}

#[test]
fn malware_is_never_whitelisted_from_infected_devices() {
    let c = desk_corpus(&DeskOptions::default());
    let t = train(&c.training.records, &c.cfg, &HostnameMap::new());
    let agents: Vec<AgentEndpoint> = c
        .cfg
        .monitored_macs
        .iter()
        .enumerate()
        .map(|(i, mac)| {
            let mut table = ProcessTable::new();
            table
                .insert("/usr/bin/firmware", format!("fw {i}").into_bytes())
                .unwrap();
            let reference = ReferenceMeasurement::from_table(&table);
            table.insert("/tmp/mirai", b"mirai".to_vec()).unwrap();
            let key = DeviceKey::from_seed([i as u8 + 1; 32]);
            let pk = key.public();
            AgentEndpoint::new(
                *mac,
                pk,
                LoopbackChannel::new(Agent::new(*mac, key, reference, table)),
            )
        })
        .collect();
    let out = run_pipeline(
        ProfileSource::Trained(t.profiles.clone(), t.hostnames.clone()),
        &c.monitoring.records,
        &c.cfg,
        MatchMode::strict(),
        agents,
        OrchestratorConfig::default(),
    );
    assert!(out.learned.is_empty());
    assert_eq!(out.profiles, t.profiles);
    assert!(!out.alerts.is_empty());
    assert!(out
        .alerts
        .iter()
        .all(|a| matches!(a.cause, AlertCause::Infected(_))));
    for v in &out.verdicts {
        assert_eq!(
            v.is_suspicious(),
            c.monitoring.labels[v.packet_index] == Label::Malicious
        );
    }
    // Budget: never more than five attestations per device in the run.
    assert!(out
        .metrics
        .attestations_per_device
        .values()
        .all(|n| *n <= 5));
    assert!(out.metrics.deferred > 0);
}

#[test]
fn sixth_attestation_within_a_minute_is_deferred() {
    let s = case1_healthy_bulb(6);
    let lengths = [200u32, 201, 202, 203, 204, 205, 206];
    let flow = lengths.iter().fold(
        FlowSpec::new(
            BULB_MAC,
            BULB_IP,
            GATEWAY_MAC,
            Endpoint::Ip("203.0.113.9".parse().unwrap()),
            Transport::Udp,
        )
        .ports(5005, 9999),
        |f, l| f.send(*l),
    );
    let trace = generate_trace(
        &[flow],
        &TraceOptions {
            seed: 6,
            start_ts_sec: 1_700_090_000,
            ..TraceOptions::default()
        },
    )
    .unwrap();
    let mut orch = orchestrator_for(
        &s,
        OrchestratorConfig {
            blocking: true,
            ..OrchestratorConfig::default()
        },
    );
    for r in &trace.records {
        orch.process(r);
    }
    let out = orch.finish();
    assert_eq!(out.metrics.suspicious, 7);
    assert_eq!(out.metrics.attestations, 5);
    assert_eq!(out.metrics.deferred, 2);
    assert_eq!(out.learned.len(), 5);
    let learned: Vec<u32> = out.learned.iter().map(|e| e.length).collect();
    assert_eq!(learned, lengths[..5]);
}

/// Holds every request until the test releases it.
struct GatedChannel {
    inner: LoopbackChannel,
    gate: mpsc::Receiver<()>,
}

impl AttestationChannel for GatedChannel {
    fn attest(
        &mut self,
        request: &AttestationRequest,
    ) -> Result<AttestationReport, TransportError> {
        self.gate.recv().map_err(|_| TransportError::Closed)?;
        self.inner.attest(request)
    }
}

#[test]
fn identical_suspicious_entries_share_one_attestation() {
    let s = case1_healthy_bulb(7);
    let t = train(&s.training.records, &s.cfg, &HostnameMap::new());
    let monitor = Monitor::from_profiles(&s.cfg, t.hostnames, t.profiles, MatchMode::strict());
    let mut orch = Orchestrator::new(monitor, Verifier::seeded(7), OrchestratorConfig::default());
    let (release, gate) = mpsc::channel();
    orch.register_agent(AgentEndpoint::new(
        BULB_MAC,
        s.public_key,
        GatedChannel {
            inner: LoopbackChannel::new(s.agent.clone()),
            gate,
        },
    ));
    let command = s.monitoring.records[0].clone();
    let v = orch.process(&command).unwrap();
    assert!(v.is_suspicious());
    assert_eq!(orch.in_flight(), 1);
    for _ in 0..3 {
        assert!(orch.process(&command).unwrap().is_suspicious());
    }
    assert_eq!(
        orch.submit(&v, command.timestamp_micros()),
        Action::Coalesced
    );
    assert_eq!(orch.metrics().attestations, 1);
    assert_eq!(orch.metrics().coalesced, 4);
    release.send(()).unwrap();
    let actions = orch.wait_all();
    assert_eq!(actions, vec![Action::Learned(v.entry.clone())]);
    // Learned now, so the same packet is benign.
    assert!(!orch.process(&command).unwrap().is_suspicious());
    assert_eq!(orch.finish().metrics.attestations, 1);
}

#[test]
fn silent_agent_times_out_and_alerts() {
    let s = case1_healthy_bulb(8);
    let t = train(&s.training.records, &s.cfg, &HostnameMap::new());
    let out = run_pipeline(
        ProfileSource::Trained(t.profiles, t.hostnames),
        &s.monitoring.records,
        &s.cfg,
        MatchMode::strict(),
        vec![AgentEndpoint::new(
            BULB_MAC,
            s.public_key,
            UnresponsiveChannel,
        )],
        OrchestratorConfig {
            deadline: Duration::from_millis(200),
            ..OrchestratorConfig::default()
        },
    );
    assert_eq!(out.alerts.len(), 2);
    for a in &out.alerts {
        assert_eq!(
            a.cause,
            AlertCause::AttestationFailed(Failure::Verify(VerifyError::Timeout))
        );
    }
    assert!(out.learned.is_empty());
}

#[test]
fn unknown_agent_is_an_alert() {
    let s = case2_infected_bulb(9);
    let out = run_pipeline(
        ProfileSource::Train(&s.training.records),
        &s.monitoring.records,
        &s.cfg,
        MatchMode::strict(),
        Vec::new(),
        OrchestratorConfig::default(),
    );
    assert_eq!(out.alerts.len(), 5);
    assert!(out
        .alerts
        .iter()
        .all(|a| a.cause == AlertCause::AttestationFailed(Failure::NoAgent)));
}

#[test]
fn infected_agent_over_tcp() {
    let s = case2_infected_bulb(10);
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let agent = s.agent.clone();
    std::thread::spawn(move || serve(&agent, &listener, None));
    let out = run_pipeline(
        ProfileSource::Train(&s.training.records),
        &s.monitoring.records,
        &s.cfg,
        MatchMode::strict(),
        vec![AgentEndpoint::new(
            BULB_MAC,
            s.public_key,
            TcpChannel::new(addr, Duration::from_secs(5)),
        )],
        OrchestratorConfig::default(),
    );
    assert!(!out.alerts.is_empty());
    let report = out.alerts[0].report().unwrap();
    assert_eq!(report.divergences[0].path, INJECTED_BINARY);
}

#[test]
fn periodic_attestation_runs_without_suspicious_traffic() {
    let s = case1_healthy_bulb(11);
    let cfg = OrchestratorConfig {
        periodic_interval_micros: Some(10_000_000),
        blocking: true,
        ..OrchestratorConfig::default()
    };
    let flow = FlowSpec::new(
        BULB_MAC,
        BULB_IP,
        Mac([0x3c, 0x22, 0xfb, 0x90, 0x11, 0x7e]),
        Endpoint::Ip(PHONE_IP),
        Transport::Udp,
    )
    .ports(5005, 5005)
    .recv(49)
    .send(95)
    .repeat(40);
    let trace = generate_trace(
        &[flow],
        &TraceOptions {
            seed: 11,
            max_gap_usec: 2_000_000,
            ..TraceOptions::default()
        },
    )
    .unwrap();
    let span =
        trace.records.last().unwrap().timestamp_micros() - trace.records[0].timestamp_micros();
    let out = run_pipeline(
        ProfileSource::Train(&s.training.records),
        &trace.records,
        &s.cfg,
        MatchMode::strict(),
        vec![AgentEndpoint::new(
            BULB_MAC,
            s.public_key,
            LoopbackChannel::new(s.agent.clone()),
        )],
        cfg,
    );
    assert_eq!(out.metrics.suspicious, 0);
    assert_eq!(out.metrics.attestations, 0);
    // Each period restarts at the packet that triggered it, so drift only loses rounds.
    let rounds = out.metrics.periodic_attestations as u64;
    assert!(
        rounds >= 1 && rounds <= span / 10_000_000,
        "{rounds} rounds over {span}us"
    );
    assert_eq!(
        out.metrics.attestations_per_device[&BULB_MAC.to_string()] as u64,
        rounds
    );
    assert!(out.alerts.is_empty());
}
