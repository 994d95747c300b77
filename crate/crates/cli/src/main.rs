use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use madea::attestation::{
    accept_reference, serve, Agent, DeviceKey, DevicePublicKey, ProcessTable, ReferenceMeasurement,
    TcpChannel,
};
use madea::monitoring::similarity::DEFAULT_SIMILARITY_THRESHOLD;
use madea::monitoring::{monitor_stream, LengthRule, MatchMode};
use madea::orchestrator::{run_pipeline, AgentEndpoint, OrchestratorConfig, ProfileSource};
use madea::pcap::{read_pcap, write_pcap};
use madea::profiling::csv_io::{
    load_hostname_map, load_profiles, save_hostname_map, save_profiles, write_profiles,
};
use madea::profiling::train;
use madea::report::{
    bench_latency, energy_projection, length_histogram, rate_report, storage_bound,
    write_histogram_csv, write_rates_csv, EnergyModel, StorageBound, YEAR_SECS,
};
use madea::scenario;
use madea::trace::{read_labels, write_labels, Label, Trace};
use madea::{HostnameMap, Mac, NetworkConfig, PacketRecord};

#[derive(Parser)]
#[command(
    name = "madea",
    version,
    about = "Traffic-triggered attestation for IoT gateways"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train per-device profiles from a benign capture
    Profile(ProfileArgs),
    /// Classify a capture against trained profiles (no attestation)
    Monitor(MonitorArgs),
    /// Monitor with the attestation feedback loop; exits 2 on any alert
    Run(RunArgs),
    /// Evaluation reports
    #[command(subcommand)]
    Report(ReportCommand),
    /// Per-packet classification latency
    Bench(BenchArgs),
    /// Serve attestation requests for one simulated device
    Agent(AgentArgs),
    /// Generate a device signing key
    Keygen {
        /// Where to write the secret key (hex)
        #[arg(long)]
        out: PathBuf,
    },
    /// Hash every file under a directory into a reference measurement
    Measure {
        #[arg(long)]
        process_dir: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Replace a device reference with an out-of-band trusted one
    AcceptReference {
        #[arg(long)]
        trusted: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Write a synthetic scenario (captures, labels, config) to a directory
    Synth(SynthArgs),
}

#[derive(Args)]
struct NetworkArgs {
    /// Network config (key = value file)
    #[arg(long)]
    config: PathBuf,
    /// Learn mDNS and multicast traffic instead of dropping it
    #[arg(long)]
    keep_multicast: bool,
}

impl NetworkArgs {
    fn load(&self) -> Result<NetworkConfig> {
        let mut cfg = NetworkConfig::load(&self.config)
            .with_context(|| format!("loading {}", self.config.display()))?;
        cfg.keep_multicast |= self.keep_multicast;
        Ok(cfg)
    }
}

#[derive(Args)]
struct ModeArgs {
    /// strict, endpoint, or tol:<k>
    #[arg(long, default_value = "strict")]
    mode: String,
    /// Minimum hostname similarity for partial matches
    #[arg(long, default_value_t = DEFAULT_SIMILARITY_THRESHOLD)]
    similarity: f64,
}

impl ModeArgs {
    fn mode(&self) -> Result<MatchMode> {
        let rule: LengthRule = self.mode.parse()?;
        Ok(MatchMode::new(rule, self.similarity)?)
    }
}

/// Either a training capture or previously saved profiles.
#[derive(Args)]
struct ProfileInput {
    /// Benign training capture
    #[arg(long, conflicts_with = "profiles")]
    train: Option<PathBuf>,
    /// Saved profile CSV
    #[arg(long)]
    profiles: Option<PathBuf>,
    /// Saved hostname map CSV, used with --profiles
    #[arg(long, requires = "profiles")]
    hostnames: Option<PathBuf>,
}

impl ProfileInput {
    fn load(&self, cfg: &NetworkConfig) -> Result<(madea::ProfileSet, HostnameMap)> {
        match (&self.train, &self.profiles) {
            (Some(path), _) => {
                let t = train(&load_capture(path)?, cfg, &HostnameMap::new());
                log::info!(
                    "trained on {} packets: {} entries observed, {} skipped",
                    t.stats.packets,
                    t.stats.entries_observed,
                    t.stats.skipped
                );
                Ok((t.profiles, t.hostnames))
            }
            (None, Some(path)) => {
                let profiles =
                    load_profiles(path).with_context(|| format!("loading {}", path.display()))?;
                let hostnames = match &self.hostnames {
                    Some(h) => {
                        load_hostname_map(h).with_context(|| format!("loading {}", h.display()))?
                    }
                    None => HostnameMap::new(),
                };
                Ok((profiles, hostnames))
            }
            (None, None) => bail!("one of --train or --profiles is required"),
        }
    }
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    train: PathBuf,
    #[command(flatten)]
    network: NetworkArgs,
    /// Profile CSV; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also save the learned IP to hostname map
    #[arg(long)]
    hostnames: Option<PathBuf>,
}

#[derive(Args)]
struct MonitorArgs {
    #[arg(long)]
    monitor: PathBuf,
    #[command(flatten)]
    input: ProfileInput,
    #[command(flatten)]
    network: NetworkArgs,
    #[command(flatten)]
    mode: ModeArgs,
    /// Verdicts as JSON Lines; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
    /// Only emit suspicious verdicts
    #[arg(long)]
    suspicious_only: bool,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    monitor: PathBuf,
    #[command(flatten)]
    input: ProfileInput,
    #[command(flatten)]
    network: NetworkArgs,
    #[command(flatten)]
    mode: ModeArgs,
    /// CSV `MAC,ADDRESS,PUBLIC_KEY` of reachable agents
    #[arg(long)]
    agents: Option<PathBuf>,
    /// Alerts as JSON Lines (also logged at warn level)
    #[arg(long)]
    alerts: Option<PathBuf>,
    /// JSON metrics summary; stdout when omitted
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Save the profiles after learning
    #[arg(long)]
    save_profiles: Option<PathBuf>,
    /// Report deadline in milliseconds
    #[arg(long, default_value_t = 5000)]
    deadline_ms: u64,
    /// Attestations allowed per device per window
    #[arg(long, default_value_t = madea::orchestrator::DEFAULT_CAPACITY)]
    capacity: u32,
    /// Rate-limit window in seconds
    #[arg(long, default_value_t = 60)]
    window_secs: u64,
    /// Also attest every device on this period (seconds of capture time)
    #[arg(long)]
    periodic: Option<u64>,
    /// Wait for each attestation before the next packet
    #[arg(long)]
    blocking: bool,
}

#[derive(Subcommand)]
enum ReportCommand {
    /// FPR (strict and endpoint-only) and TPR per device, as CSV
    Rates {
        #[arg(long)]
        train: PathBuf,
        #[arg(long)]
        monitor: PathBuf,
        /// Ground truth for the monitoring capture
        #[arg(long)]
        labels: Option<PathBuf>,
        #[command(flatten)]
        network: NetworkArgs,
        /// Add unique-entry FPR columns
        #[arg(long)]
        dedup: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Profile size against the devices x endpoints x lengths bound, as JSON
    Storage {
        #[arg(long, required_unless_present = "aggregates")]
        profiles: Option<PathBuf>,
        /// Published figures `N,D,E,L` instead of a profile file
        #[arg(long, value_delimiter = ',')]
        aggregates: Option<Vec<f64>>,
    },
    /// Yearly energy of periodic attestation, as CSV
    Energy {
        /// Energy per attestation in mWh
        #[arg(long)]
        per_attestation: f64,
        /// Intervals in seconds
        #[arg(long, value_delimiter = ',', default_value = "3600,1800,600,300,60")]
        intervals: Vec<u64>,
        #[arg(long, default_value_t = YEAR_SECS)]
        horizon_secs: u64,
    },
    /// Packet length histogram per class, as CSV
    Hist {
        #[arg(long)]
        trace: PathBuf,
        #[arg(long)]
        labels: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long)]
    monitor: PathBuf,
    #[command(flatten)]
    input: ProfileInput,
    #[command(flatten)]
    network: NetworkArgs,
    #[command(flatten)]
    mode: ModeArgs,
}

#[derive(Args)]
struct AgentArgs {
    #[arg(long)]
    listen: SocketAddr,
    /// Directory whose files stand in for the running binaries
    #[arg(long)]
    process_dir: PathBuf,
    /// Reference CSV `PATH,SHA256HEX`; re-read on every request
    #[arg(long)]
    reference: PathBuf,
    /// Secret key file (hex)
    #[arg(long)]
    key: PathBuf,
    /// MAC of the device this agent speaks for
    #[arg(long)]
    mac: Mac,
    /// Exit after this many connections
    #[arg(long)]
    max_connections: Option<usize>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioKind {
    /// Several devices plus injected botnet flows
    Desk,
    /// Healthy bulb receiving an unseen status command
    BulbHealthy,
    /// Bulb with an injected binary talking to its C2 server
    BulbInfected,
    /// Large profile and 100k-packet capture for benchmarking
    Latency,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(value_enum)]
    scenario: ScenarioKind,
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Device count (desk and latency scenarios)
    #[arg(long)]
    devices: Option<usize>,
    /// Injected malware flows (desk scenario)
    #[arg(long)]
    malware_flows: Option<usize>,
}

fn load_capture(path: &Path) -> Result<Vec<PacketRecord>> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    read_pcap(&bytes).with_context(|| format!("parsing {}", path.display()))
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(
            File::create(p).with_context(|| format!("creating {}", p.display()))?,
        )),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn load_key(path: &Path) -> Result<DeviceKey> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(DeviceKey::from_hex(text.trim())?)
}

/// Agent map rows: `MAC,ADDRESS,PUBLIC_KEY`, header optional.
fn load_agents(path: &Path, deadline: Duration) -> Result<Vec<AgentEndpoint>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let mut agents = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty()
            || line.starts_with('#')
            || (i == 0 && line.to_ascii_uppercase().starts_with("MAC"))
        {
            continue;
        }
        let fields: Vec<&str> = line.split(',').map(str::trim).collect();
        let [mac, addr, key] = fields[..] else {
            bail!(
                "{}:{}: expected MAC,ADDRESS,PUBLIC_KEY",
                path.display(),
                i + 1
            );
        };
        let mac: Mac = mac
            .parse()
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let addr: SocketAddr = addr
            .parse()
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        let key = DevicePublicKey::from_hex(key)
            .with_context(|| format!("{}:{}", path.display(), i + 1))?;
        agents.push(AgentEndpoint::new(
            mac,
            key,
            TcpChannel::new(addr, deadline),
        ));
    }
    Ok(agents)
}

fn cmd_profile(args: ProfileArgs) -> Result<()> {
    let cfg = args.network.load()?;
    let t = train(&load_capture(&args.train)?, &cfg, &HostnameMap::new());
    match &args.out {
        Some(p) => save_profiles(&t.profiles, p)?,
        None => write_profiles(&t.profiles, io::stdout().lock())?,
    }
    if let Some(h) = &args.hostnames {
        save_hostname_map(&t.hostnames, h)?;
    }
    let entries: usize = t.profiles.values().map(|p| p.entry_count()).sum();
    eprintln!(
        "{} devices, {entries} entries from {} packets ({} skipped, {} errors)",
        t.profiles.len(),
        t.stats.packets,
        t.stats.skipped,
        t.stats.errors
    );
    Ok(())
}

fn cmd_monitor(args: MonitorArgs) -> Result<()> {
    let cfg = args.network.load()?;
    let (profiles, hostnames) = args.input.load(&cfg)?;
    let records = load_capture(&args.monitor)?;
    let verdicts = monitor_stream(&records, &cfg, &hostnames, &profiles, &args.mode.mode()?);
    let mut out = output(args.out.as_deref())?;
    let mut suspicious = 0;
    for v in &verdicts {
        suspicious += usize::from(v.is_suspicious());
        if !args.suspicious_only || v.is_suspicious() {
            writeln!(out, "{}", v.to_json_line())?;
        }
    }
    out.flush()?;
    eprintln!("{} verdicts, {suspicious} suspicious", verdicts.len());
    Ok(())
}

fn cmd_run(args: RunArgs) -> Result<ExitCode> {
    let cfg = args.network.load()?;
    let (profiles, hostnames) = args.input.load(&cfg)?;
    let records = load_capture(&args.monitor)?;
    let deadline = Duration::from_millis(args.deadline_ms);
    let agents = match &args.agents {
        Some(p) => load_agents(p, deadline)?,
        None => Vec::new(),
    };
    let config = OrchestratorConfig {
        capacity: args.capacity,
        refill_interval_micros: args.window_secs * 1_000_000,
        deadline,
        periodic_interval_micros: args.periodic.map(|s| s * 1_000_000),
        blocking: args.blocking,
    };
    let outcome = run_pipeline(
        ProfileSource::Trained(profiles, hostnames),
        &records,
        &cfg,
        args.mode.mode()?,
        agents,
        config,
    );
    if let Some(p) = &args.alerts {
        let mut out = output(Some(p))?;
        for a in &outcome.alerts {
            writeln!(out, "{}", a.to_json_line())?;
        }
        out.flush()?;
    }
    if let Some(p) = &args.save_profiles {
        save_profiles(&outcome.profiles, p)?;
    }
    let mut out = output(args.metrics.as_deref())?;
    serde_json::to_writer_pretty(&mut out, &outcome.metrics)?;
    writeln!(out)?;
    out.flush()?;
    Ok(if outcome.alerts.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    })
}

fn cmd_report(cmd: ReportCommand) -> Result<()> {
    match cmd {
        ReportCommand::Rates {
            train: training,
            monitor,
            labels,
            network,
            dedup,
            out,
        } => {
            let cfg = network.load()?;
            let training = load_capture(&training)?;
            let monitoring = load_capture(&monitor)?;
            let labels = match labels {
                Some(p) => Some(read_labels(File::open(&p)?).map_err(anyhow::Error::msg)?),
                None => None,
            };
            let t = train(&training, &cfg, &HostnameMap::new());
            let report = rate_report(
                &training,
                &monitoring,
                labels.as_deref(),
                &cfg,
                &t.hostnames,
                &t.profiles,
            )?;
            write_rates_csv(&report, output(out.as_deref())?, dedup)?;
        }
        ReportCommand::Storage {
            profiles,
            aggregates,
        } => {
            let bound = match (aggregates, profiles) {
                (Some(a), _) if a.len() != 4 => bail!("--aggregates takes N,D,E,L"),
                (Some(a), _) => {
                    StorageBound::from_aggregates(a[0] as usize, a[1] as usize, a[2], a[3])
                }
                (None, Some(p)) => storage_bound(&load_profiles(&p)?),
                (None, None) => bail!("one of --profiles or --aggregates is required"),
            };
            let mut value = serde_json::to_value(bound)?;
            value["holds"] = bound.holds().into();
            println!("{}", serde_json::to_string_pretty(&value)?);
        }
        ReportCommand::Energy {
            per_attestation,
            intervals,
            horizon_secs,
        } => {
            let model = EnergyModel::new(per_attestation, horizon_secs)?;
            let mut out = output(None)?;
            writeln!(out, "INTERVAL_SECS,ATTESTATIONS,ENERGY_MWH")?;
            for row in energy_projection(&model, &intervals)? {
                writeln!(
                    out,
                    "{},{},{:.2}",
                    row.interval_secs, row.attestations, row.energy_mwh
                )?;
            }
            out.flush()?;
        }
        ReportCommand::Hist { trace, labels, out } => {
            let records = load_capture(&trace)?;
            let labels = read_labels(File::open(&labels)?).map_err(anyhow::Error::msg)?;
            let hist = length_histogram(&records, &labels)?;
            write_histogram_csv(&hist, output(out.as_deref())?)?;
        }
    }
    Ok(())
}

fn cmd_bench(args: BenchArgs) -> Result<()> {
    let cfg = args.network.load()?;
    let (profiles, hostnames) = args.input.load(&cfg)?;
    let records = load_capture(&args.monitor)?;
    if records.len() < 100_000 {
        log::warn!(
            "only {} packets; medians below 10^5 packets are noisy",
            records.len()
        );
    }
    let report = bench_latency(&records, &cfg, &hostnames, &profiles, &args.mode.mode()?)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn cmd_agent(args: AgentArgs) -> Result<()> {
    let key = load_key(&args.key)?;
    let agent = Agent::from_dir(
        args.mac,
        key,
        ReferenceMeasurement::default(),
        args.process_dir.clone(),
    )
    .with_reference_file(args.reference.clone())?;
    // Fail early on an unreadable process directory.
    agent.current_table()?;
    let listener =
        TcpListener::bind(args.listen).with_context(|| format!("binding {}", args.listen))?;
    println!("listening on {}", listener.local_addr()?);
    println!("public key {}", agent.key().public());
    io::stdout().flush()?;
    serve(&agent, &listener, args.max_connections)?;
    Ok(())
}

fn cmd_keygen(out: &Path) -> Result<()> {
    let key = DeviceKey::generate(&mut rand::rngs::OsRng);
    fs::write(out, format!("{}\n", key.to_hex()))?;
    println!("{}", key.public());
    Ok(())
}

fn write_table(table: &ProcessTable, dir: &Path) -> Result<()> {
    for (path, binary) in table.iter() {
        let file = dir.join(path.trim_start_matches('/'));
        if let Some(parent) = file.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&file, binary)?;
    }
    Ok(())
}

fn write_trace(trace: &Trace, dir: &Path, name: &str) -> Result<()> {
    fs::write(
        dir.join(format!("{name}.pcap")),
        write_pcap(&trace.records)?,
    )?;
    write_labels(
        &trace.labels,
        File::create(dir.join(format!("{name}.labels")))?,
    )?;
    Ok(())
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let dir = &args.out_dir;
    fs::create_dir_all(dir)?;
    let (cfg, training, monitoring) = match args.scenario {
        ScenarioKind::Desk => {
            let mut opts = scenario::DeskOptions {
                seed: args.seed,
                ..Default::default()
            };
            opts.devices = args.devices.unwrap_or(opts.devices);
            opts.malware_flows = args.malware_flows.unwrap_or(opts.malware_flows);
            let c = scenario::desk_corpus(&opts);
            (c.cfg, c.training, c.monitoring)
        }
        ScenarioKind::Latency => {
            let mut opts = scenario::LatencyOptions {
                seed: args.seed,
                ..Default::default()
            };
            opts.devices = args.devices.unwrap_or(opts.devices);
            let c = scenario::latency_corpus(&opts);
            (c.cfg, c.training, c.monitoring)
        }
        ScenarioKind::BulbHealthy | ScenarioKind::BulbInfected => {
            let s = if matches!(args.scenario, ScenarioKind::BulbHealthy) {
                scenario::case1_healthy_bulb(args.seed)
            } else {
                scenario::case2_infected_bulb(args.seed)
            };
            let procs = dir.join("procs");
            fs::create_dir_all(&procs)?;
            write_table(&s.agent.current_table()?, &procs)?;
            s.agent.reference().save(&dir.join("reference.csv"))?;
            fs::write(
                dir.join("bulb.key"),
                format!("{}\n", s.agent.key().to_hex()),
            )?;
            fs::write(dir.join("bulb.pub"), format!("{}\n", s.public_key))?;
            if !s.replay.is_empty() {
                write_trace(&s.replay, dir, "replay")?;
            }
            (s.cfg, s.training, s.monitoring)
        }
    };
    fs::write(dir.join("network.conf"), cfg.to_config_text(None))?;
    write_trace(&training, dir, "training")?;
    write_trace(&monitoring, dir, "monitoring")?;
    let malicious = monitoring
        .labels
        .iter()
        .filter(|l| **l == Label::Malicious)
        .count();
    eprintln!(
        "wrote {}: {} training and {} monitoring packets ({malicious} malicious)",
        dir.display(),
        training.len(),
        monitoring.len()
    );
    Ok(())
}

fn run(cli: Cli) -> Result<ExitCode> {
    match cli.command {
        Command::Profile(a) => cmd_profile(a)?,
        Command::Monitor(a) => cmd_monitor(a)?,
        Command::Run(a) => return cmd_run(a),
        Command::Report(c) => cmd_report(c)?,
        Command::Bench(a) => cmd_bench(a)?,
        Command::Agent(a) => cmd_agent(a)?,
        Command::Keygen { out } => cmd_keygen(&out)?,
        Command::Measure { process_dir, out } => {
            let table = ProcessTable::from_dir(&process_dir)?;
            ReferenceMeasurement::from_table(&table).save(&out)?;
            eprintln!("measured {} binaries", table.len());
        }
        Command::AcceptReference { trusted, target } => {
            let r = accept_reference(&trusted, &target)?;
            eprintln!(
                "accepted {} entries into {}",
                r.expected.len(),
                target.display()
            );
        }
        Command::Synth(a) => cmd_synth(a)?,
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => code,
        Err(e)
            if e.downcast_ref::<io::Error>()
                .is_some_and(|e| e.kind() == io::ErrorKind::BrokenPipe) =>
        {
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
