//! Ready-made deployments built on the trace generator: the smart-bulb
//! feedback-loop cases, a multi-device desk corpus with injected botnet
//! flows, and a large corpus for latency measurements.

use std::net::Ipv4Addr;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};

use crate::attestation::{Agent, DeviceKey, DevicePublicKey, ProcessTable, ReferenceMeasurement};
use crate::packet::{Mac, Transport};
use crate::profiling::NetworkConfig;
use crate::trace::{generate_trace, Endpoint, FlowSpec, Label, Trace, TraceOptions};

pub const GATEWAY_MAC: Mac = Mac([0xdc, 0xa6, 0x32, 0xce, 0x31, 0x63]);
pub const BULB_MAC: Mac = Mac([0xb8, 0x27, 0xeb, 0x4f, 0x1a, 0x02]);
pub const PHONE_MAC: Mac = Mac([0x3c, 0x22, 0xfb, 0x90, 0x11, 0x7e]);
pub const BULB_IP: Ipv4Addr = Ipv4Addr::new(192, 168, 4, 50);
pub const PHONE_IP: Ipv4Addr = Ipv4Addr::new(192, 168, 4, 23);
pub const CCC_IP: Ipv4Addr = Ipv4Addr::new(198, 98, 50, 97);
pub const BULB_PORT: u16 = 5005;
pub const INJECTED_BINARY: &str = "/var/tmp/dvrHelper";

/// Start of the monitoring phase, one day after training starts.
const MONITOR_START: u32 = 1_700_086_400;

/// A monitored network plus its training and monitoring captures.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub cfg: NetworkConfig,
    pub training: Trace,
    pub monitoring: Trace,
}

fn opts(seed: u64, start: u32) -> TraceOptions {
    TraceOptions {
        seed,
        start_ts_sec: start,
        ..TraceOptions::default()
    }
}

fn generate(flows: &[FlowSpec], seed: u64, start: u32) -> Trace {
    generate_trace(flows, &opts(seed, start)).expect("built-in flows are valid")
}

/// Running binaries of the emulated bulb.
pub fn bulb_process_table() -> ProcessTable {
    let mut t = ProcessTable::new();
    for (path, body) in [
        ("/lib/systemd/systemd", "systemd 247"),
        ("/usr/sbin/sshd", "OpenSSH_8.4p1"),
        ("/usr/bin/python3.9", "Python 3.9.2"),
        (
            "/home/pi/bulb/controller.py",
            "import socket  # bulb controller",
        ),
        ("/home/pi/bulb/attester.py", "import hashlib  # attester"),
    ] {
        t.insert(path, body.as_bytes().to_vec())
            .expect("non-empty binary");
    }
    t
}

pub fn bulb_key(seed: u64) -> DeviceKey {
    DeviceKey::generate(&mut StdRng::seed_from_u64(seed ^ 0x6b65_7973))
}

/// Bulb agent whose reference is its clean process table; `infected` adds
/// one extra binary afterwards.
pub fn bulb_agent(seed: u64, infected: bool) -> (Agent, DevicePublicKey) {
    let table = bulb_process_table();
    let reference = ReferenceMeasurement::from_table(&table);
    let mut running = table;
    if infected {
        running
            .insert(INJECTED_BINARY, b"\x7fELF\x01\x01\x01 arm bot".to_vec())
            .expect("non-empty binary");
    }
    let key = bulb_key(seed);
    let pk = key.public();
    (Agent::new(BULB_MAC, key, reference, running), pk)
}

fn bulb_config() -> NetworkConfig {
    NetworkConfig::new(GATEWAY_MAC, [BULB_MAC]).with_name(BULB_MAC, "RPi Smart Bulb")
}

/// Phone-to-bulb command and its response, over UDP on the LAN.
pub fn bulb_exchange(command_len: u32, response_len: u32, repeat: usize) -> FlowSpec {
    FlowSpec::new(
        BULB_MAC,
        BULB_IP,
        PHONE_MAC,
        Endpoint::Ip(PHONE_IP),
        Transport::Udp,
    )
    .ports(BULB_PORT, 50_123)
    .recv(command_len)
    .send(response_len)
    .repeat(repeat)
}

fn bulb_training(seed: u64) -> Trace {
    generate(
        &[bulb_exchange(49, 95, 10), bulb_exchange(50, 96, 10)],
        seed,
        TraceOptions::default().start_ts_sec,
    )
}

#[derive(Debug, Clone)]
pub struct BulbScenario {
    pub cfg: NetworkConfig,
    pub training: Trace,
    pub monitoring: Trace,
    /// Traffic replayed after the monitoring phase.
    pub replay: Trace,
    pub agent: Agent,
    pub public_key: DevicePublicKey,
}

/// Healthy bulb receiving a command it was never trained on: `status`
/// (48 bytes) answered with a 102-byte response.
pub fn case1_healthy_bulb(seed: u64) -> BulbScenario {
    let (agent, public_key) = bulb_agent(seed, false);
    BulbScenario {
        cfg: bulb_config(),
        training: bulb_training(seed),
        monitoring: generate(&[bulb_exchange(48, 102, 1)], seed + 1, MONITOR_START),
        replay: generate(&[bulb_exchange(48, 102, 1)], seed + 2, MONITOR_START + 3600),
        agent,
        public_key,
    }
}

/// Infected bulb whose bot contacts its command-and-control server.
pub fn case2_infected_bulb(seed: u64) -> BulbScenario {
    let (agent, public_key) = bulb_agent(seed, true);
    let ccc = FlowSpec::new(
        BULB_MAC,
        BULB_IP,
        GATEWAY_MAC,
        Endpoint::Ip(CCC_IP),
        Transport::Tcp,
    )
    .ports(43_512, 23)
    .send(74)
    .recv(74)
    .send(66)
    .send(78)
    .recv(66)
    .malicious();
    BulbScenario {
        cfg: bulb_config(),
        training: bulb_training(seed),
        monitoring: generate(&[bulb_exchange(49, 95, 1), ccc], seed + 1, MONITOR_START),
        replay: Trace::default(),
        agent,
        public_key,
    }
}

struct DeviceSpec {
    mac: Mac,
    ip: Ipv4Addr,
    name: &'static str,
    flows: Vec<FlowSpec>,
}

fn ip(a: u8, b: u8, c: u8, d: u8) -> Ipv4Addr {
    Ipv4Addr::new(a, b, c, d)
}

fn cloud(dev: Mac, dev_ip: Ipv4Addr, peer: Endpoint, t: Transport, port: u16) -> FlowSpec {
    FlowSpec::new(dev, dev_ip, GATEWAY_MAC, peer, t).ports(40_000 + port % 1000, port)
}

fn builtin_devices() -> Vec<DeviceSpec> {
    let thermostat = Mac([0x34, 0x6f, 0x92, 0x1d, 0xba, 0x50]);
    let camera = Mac([0x18, 0xb4, 0x30, 0x6c, 0x21, 0x9e]);
    let plug = Mac([0x68, 0x57, 0x2d, 0x0a, 0x44, 0x13]);
    let speaker = Mac([0xfc, 0x65, 0xde, 0x3a, 0x7c, 0x01]);
    let vacuum = Mac([0x50, 0x14, 0x79, 0x22, 0x8b, 0x5d]);
    let (t_ip, c_ip, p_ip, s_ip, v_ip) = (
        ip(192, 168, 4, 10),
        ip(192, 168, 4, 11),
        ip(192, 168, 4, 12),
        ip(192, 168, 4, 13),
        ip(192, 168, 4, 14),
    );
    vec![
        DeviceSpec {
            mac: thermostat,
            ip: t_ip,
            name: "Sensi Thermostat",
            flows: vec![cloud(
                thermostat,
                t_ip,
                Endpoint::host("icda.sensicomfort.com", ip(54, 84, 12, 7)),
                Transport::Tcp,
                8883,
            )
            .send(104)
            .recv(58)
            .send(58)
            .recv(86)
            .repeat(6)],
        },
        DeviceSpec {
            mac: camera,
            ip: c_ip,
            name: "Nest Camera",
            flows: vec![
                cloud(
                    camera,
                    c_ip,
                    Endpoint::host("oculus9353-us1.dropcam.com", ip(35, 186, 98, 64)),
                    Transport::Tcp,
                    443,
                )
                .send(1514)
                .send(590)
                .recv(66)
                .repeat(8),
                cloud(
                    camera,
                    c_ip,
                    Endpoint::host("nexus.dropcam.com", ip(35, 186, 101, 2)),
                    Transport::Tcp,
                    443,
                )
                .send(230)
                .recv(120)
                .repeat(3),
            ],
        },
        DeviceSpec {
            mac: plug,
            ip: p_ip,
            name: "Tuya Smart Plug",
            flows: vec![cloud(
                plug,
                p_ip,
                Endpoint::host("m2.tuyaus.com", ip(54, 212, 163, 173)),
                Transport::Tcp,
                8886,
            )
            .send(157)
            .recv(171)
            .send(90)
            .recv(66)
            .repeat(5)],
        },
        DeviceSpec {
            mac: BULB_MAC,
            ip: BULB_IP,
            name: "RPi Smart Bulb",
            flows: vec![bulb_exchange(49, 95, 4), bulb_exchange(50, 96, 4)],
        },
        DeviceSpec {
            mac: speaker,
            ip: s_ip,
            name: "Echo Speaker",
            flows: vec![
                cloud(
                    speaker,
                    s_ip,
                    Endpoint::host(
                        "ec2-35-164-195-39.us-west-2.compute.amazonaws.com",
                        ip(35, 164, 195, 39),
                    ),
                    Transport::Tcp,
                    443,
                )
                .send(310)
                .recv(1180)
                .recv(420)
                .repeat(4),
                cloud(
                    speaker,
                    s_ip,
                    Endpoint::host("device-metrics-us.amazon.com", ip(52, 94, 233, 12)),
                    Transport::Tcp,
                    443,
                )
                .send(640)
                .recv(90)
                .repeat(2),
            ],
        },
        DeviceSpec {
            mac: vacuum,
            ip: v_ip,
            name: "iRobot Roomba",
            flows: vec![cloud(
                vacuum,
                v_ip,
                Endpoint::Ip(ip(52, 1, 44, 190)),
                Transport::Udp,
                8080,
            )
            .send(120)
            .recv(120)
            .send(88)
            .repeat(5)],
        },
    ]
}

fn generic_device(i: usize) -> DeviceSpec {
    let mac = Mac([0x02, 0x1a, 0x11, 0x00, (i >> 8) as u8, i as u8]);
    let dev_ip = ip(10, 20, (i >> 8) as u8, (i % 250) as u8 + 2);
    let host = format!("api{}.vendor{i}.com", i % 3);
    DeviceSpec {
        mac,
        ip: dev_ip,
        name: "Generic Device",
        flows: vec![cloud(
            mac,
            dev_ip,
            Endpoint::host(&host, ip(34, 100, (i % 250) as u8, 9)),
            Transport::Tcp,
            443,
        )
        .send(200 + (i % 50) as u32)
        .recv(300)
        .repeat(3)],
    }
}

/// Botnet traffic shapes: scan SYNs, handshake plus install payload,
/// heartbeats and pushed attack commands.
fn malware_flow(i: usize, dev: &DeviceSpec) -> FlowSpec {
    let peer = if i % 5 == 4 {
        Endpoint::host(
            &format!("c2-{i}.botnet{}.xyz", i % 7),
            ip(185, 165, (i / 250) as u8, (i % 250) as u8 + 1),
        )
    } else {
        Endpoint::Ip(ip(198, 51 + (i / 250) as u8, 100, (i % 250) as u8 + 1))
    };
    let base = FlowSpec::new(dev.mac, dev.ip, GATEWAY_MAC, peer, Transport::Tcp).malicious();
    let sport = (43_000 + i % 20_000) as u16;
    match i % 4 {
        0 => base.ports(sport, 23).send(74).repeat(3),
        1 => base
            .ports(sport, 2323)
            .send(74)
            .recv(74)
            .send(66)
            .recv(590)
            .send(66),
        2 => base.ports(sport, 6667).send(66).recv(66).repeat(3),
        _ => base.ports(sport, 6667).recv(98).send(66).recv(112),
    }
}

#[derive(Debug, Clone)]
pub struct DeskOptions {
    pub seed: u64,
    /// At least five; devices beyond the six built-in ones are generic.
    pub devices: usize,
    pub malware_flows: usize,
}

impl Default for DeskOptions {
    fn default() -> Self {
        DeskOptions {
            seed: 7,
            devices: 6,
            malware_flows: 120,
        }
    }
}

/// Benign training capture, then a monitoring capture that replays the same
/// benign flows interleaved with botnet flows to endpoints no device ever
/// talked to.
pub fn desk_corpus(options: &DeskOptions) -> Corpus {
    let mut devices = builtin_devices();
    devices.truncate(options.devices);
    for i in devices.len()..options.devices {
        devices.push(generic_device(i));
    }
    let mut cfg = NetworkConfig::new(GATEWAY_MAC, devices.iter().map(|d| d.mac));
    for d in &devices {
        cfg = cfg.with_name(d.mac, d.name);
    }
    let benign: Vec<FlowSpec> = devices.iter().flat_map(|d| d.flows.clone()).collect();
    let training = generate(&benign, options.seed, TraceOptions::default().start_ts_sec);

    let mut flows = benign;
    flows.extend((0..options.malware_flows).map(|i| malware_flow(i, &devices[i % devices.len()])));
    flows.shuffle(&mut StdRng::seed_from_u64(options.seed));
    let monitoring = generate(&flows, options.seed + 1, MONITOR_START);
    Corpus {
        cfg,
        training,
        monitoring,
    }
}

#[derive(Debug, Clone)]
pub struct LatencyOptions {
    pub seed: u64,
    pub devices: usize,
    pub endpoints: usize,
    pub lengths: usize,
    pub packets: usize,
    /// Share of monitored packets with a length never seen in training.
    pub miss_rate: f64,
}

impl Default for LatencyOptions {
    fn default() -> Self {
        LatencyOptions {
            seed: 11,
            devices: 13,
            endpoints: 13,
            lengths: 23,
            packets: 100_000,
            miss_rate: 0.05,
        }
    }
}

/// Every device talks to `endpoints` hostnames with `lengths` distinct
/// frame lengths each, so training yields `devices * endpoints * lengths`
/// entries. Monitoring draws `packets` packets from the same space.
pub fn latency_corpus(options: &LatencyOptions) -> Corpus {
    let mut rng = StdRng::seed_from_u64(options.seed);
    let mut cfg = NetworkConfig::new(GATEWAY_MAC, []);
    let mut pairs = Vec::new();
    for d in 0..options.devices {
        let mac = Mac([0x02, 0x4c, 0x00, 0x00, (d >> 8) as u8, d as u8]);
        let dev_ip = ip(192, 168, 10 + (d / 200) as u8, (d % 200) as u8 + 2);
        cfg.monitored_macs.insert(mac);
        cfg = cfg.with_name(mac, &format!("device-{d}"));
        for e in 0..options.endpoints {
            let host = Endpoint::host(
                &format!("node{e}.svc{d}.example.com"),
                ip(34, 10 + (d % 200) as u8, e as u8, 10),
            );
            pairs.push(cloud(mac, dev_ip, host, Transport::Tcp, 443));
        }
    }
    let length_of = |k: usize| 60 + 7 * k as u32;
    let training_flows: Vec<FlowSpec> = pairs
        .iter()
        .map(|p| (0..options.lengths).fold(p.clone(), |f, k| f.send(length_of(k))))
        .collect();
    let training = generate(
        &training_flows,
        options.seed,
        TraceOptions::default().start_ts_sec,
    );

    let mut monitoring = Trace::default();
    let mut remaining = options.packets;
    let mut chunk = 0u64;
    while remaining > 0 {
        let n = remaining.min(10_000);
        let flows: Vec<FlowSpec> = (0..n)
            .map(|_| {
                let pair = &pairs[rng.gen_range(0..pairs.len())];
                let len = if rng.gen_bool(options.miss_rate) {
                    length_of(options.lengths) + rng.gen_range(0..50)
                } else {
                    length_of(rng.gen_range(0..options.lengths))
                };
                pair.clone().send(len)
            })
            .collect();
        let t = generate(
            &flows,
            options.seed + 1 + chunk,
            MONITOR_START + chunk as u32 * 3600,
        );
        // DNS preambles are dropped so the packet count is exact.
        for (rec, label) in t.records.into_iter().zip(t.labels) {
            if label != Label::Config {
                monitoring.records.push(rec);
                monitoring.labels.push(label);
            }
        }
        remaining -= n;
        chunk += 1;
    }
    Corpus {
        cfg,
        training,
        monitoring,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::profiling::{total_entries, train, Direction, HostnameMap};

    #[test]
    fn case1_training_profile() {
        let s = case1_healthy_bulb(1);
        let t = train(&s.training.records, &s.cfg, &HostnameMap::new());
        let p = &t.profiles[&BULB_MAC];
        assert_eq!(p.entry_count(), 4);
        let phone = PHONE_IP.to_string();
        assert!(p.contains(&phone, Direction::UserToDevice, 49));
        assert!(p.contains(&phone, Direction::DeviceToUser, 95));
        assert!(p.contains(&phone, Direction::UserToDevice, 50));
        assert!(p.contains(&phone, Direction::DeviceToUser, 96));
        let lens: Vec<u32> = s.monitoring.records.iter().map(|r| r.frame_len).collect();
        assert_eq!(lens, vec![48, 102]);
    }

    #[test]
    fn infected_agent_reports_injected_binary() {
        let (agent, _) = bulb_agent(3, true);
        assert!(agent
            .current_table()
            .unwrap()
            .iter()
            .any(|(p, _)| p == INJECTED_BINARY));
        let (clean, _) = bulb_agent(3, false);
        assert_eq!(
            ReferenceMeasurement::from_table(&clean.current_table().unwrap()),
            *clean.reference()
        );
    }

    #[test]
    fn desk_corpus_shape() {
        let c = desk_corpus(&DeskOptions::default());
        assert!(c.cfg.monitored_macs.len() >= 5);
        let malicious = c
            .monitoring
            .labels
            .iter()
            .filter(|l| **l == Label::Malicious)
            .count();
        assert!(malicious >= 120);
        assert_eq!(c.monitoring.records.len(), c.monitoring.labels.len());

        let bigger = desk_corpus(&DeskOptions {
            devices: 9,
            ..DeskOptions::default()
        });
        assert_eq!(bigger.cfg.monitored_macs.len(), 9);
    }

    #[test]
    fn small_latency_corpus_entry_count() {
        let c = latency_corpus(&LatencyOptions {
            devices: 2,
            endpoints: 3,
            lengths: 4,
            packets: 500,
            ..LatencyOptions::default()
        });
        let t = train(&c.training.records, &c.cfg, &HostnameMap::new());
        assert_eq!(total_entries(&t.profiles), 24);
        assert_eq!(c.monitoring.len(), 500);
    }
}
