//! Software-state attestation of a simulated device.
//!
//! The device side (prover) hashes the binaries in its process table,
//! compares them against a reference measurement and returns a signed report
//! that carries only the divergences. The gateway side (verifier) issues
//! one-time challenges and checks signature, freshness and replay.

mod agent;
pub mod wire;

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use ed25519_dalek::{Signature, Signer, SigningKey, VerifyingKey};
use rand::rngs::StdRng;
use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};
use sha2::{Digest as _, Sha256};
use thiserror::Error;

use crate::packet::Mac;

pub use agent::{
    serve, serve_connection, Agent, AttestationChannel, LoopbackChannel, TcpChannel,
    TransportError, UnresponsiveChannel,
};

pub type Digest = [u8; 32];

/// Default window for a report to arrive after its request was issued.
pub const DEFAULT_DEADLINE_MICROS: u64 = 5_000_000;

#[derive(Debug, Error)]
pub enum AttestError {
    #[error("process {0:?} has an empty binary")]
    EmptyBinary(String),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid key: {0}")]
    BadKey(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Running binaries of a simulated device, keyed by path.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ProcessTable {
    processes: BTreeMap<String, Vec<u8>>,
}

impl ProcessTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, path: impl Into<String>, binary: Vec<u8>) -> Result<(), AttestError> {
        let path = path.into();
        if binary.is_empty() {
            return Err(AttestError::EmptyBinary(path));
        }
        self.processes.insert(path, binary);
        Ok(())
    }

    pub fn remove(&mut self, path: &str) -> Option<Vec<u8>> {
        self.processes.remove(path)
    }

    pub fn get_mut(&mut self, path: &str) -> Option<&mut Vec<u8>> {
        self.processes.get_mut(path)
    }

    pub fn len(&self) -> usize {
        self.processes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.processes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Vec<u8>)> {
        self.processes.iter()
    }

    /// Loads every regular file under `dir`; the key is the path relative to
    /// `dir` with a leading `/`, e.g. `dir/usr/bin/lightd` -> `/usr/bin/lightd`.
    pub fn from_dir(dir: &Path) -> Result<Self, AttestError> {
        fn walk(root: &Path, dir: &Path, out: &mut ProcessTable) -> Result<(), AttestError> {
            let mut entries: Vec<PathBuf> = std::fs::read_dir(dir)?
                .map(|e| e.map(|e| e.path()))
                .collect::<Result<_, _>>()?;
            entries.sort();
            for path in entries {
                if path.is_dir() {
                    walk(root, &path, out)?;
                } else if path.is_file() {
                    let rel = path.strip_prefix(root).expect("walked path is under root");
                    let key = format!(
                        "/{}",
                        rel.components()
                            .map(|c| c.as_os_str().to_string_lossy())
                            .collect::<Vec<_>>()
                            .join("/")
                    );
                    out.insert(key, std::fs::read(&path)?)?;
                }
            }
            Ok(())
        }
        let mut table = ProcessTable::new();
        walk(dir, dir, &mut table)?;
        Ok(table)
    }
}

/// SHA-256 of every binary in the table.
pub fn measure(table: &ProcessTable) -> BTreeMap<String, Digest> {
    table
        .iter()
        .map(|(path, bytes)| (path.clone(), Sha256::digest(bytes).into()))
        .collect()
}

/// Expected binary digests of a healthy device.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReferenceMeasurement {
    pub expected: BTreeMap<String, Digest>,
}

impl ReferenceMeasurement {
    pub fn from_table(table: &ProcessTable) -> Self {
        ReferenceMeasurement {
            expected: measure(table),
        }
    }

    /// `PATH,SHA256HEX` rows; a header row is optional when reading.
    pub fn write_csv<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(out, "PATH,SHA256HEX")?;
        for (path, digest) in &self.expected {
            writeln!(out, "{},{}", path, hex::encode(digest))?;
        }
        out.flush()
    }

    pub fn read_csv<R: Read>(mut input: R) -> Result<Self, AttestError> {
        let mut text = String::new();
        input.read_to_string(&mut text)?;
        let mut expected = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || (i == 0 && line == "PATH,SHA256HEX") {
                continue;
            }
            let bad = |message: String| AttestError::Parse {
                line: i + 1,
                message,
            };
            let (path, digest) = line
                .rsplit_once(',')
                .ok_or_else(|| bad(format!("expected PATH,SHA256HEX, got {line:?}")))?;
            let bytes = hex::decode(digest.trim()).map_err(|e| bad(e.to_string()))?;
            let digest: Digest = bytes
                .try_into()
                .map_err(|_| bad("digest must be 32 bytes".to_string()))?;
            if path.is_empty() {
                return Err(bad("empty path".into()));
            }
            expected.insert(path.to_string(), digest);
        }
        Ok(ReferenceMeasurement { expected })
    }

    pub fn save(&self, path: &Path) -> Result<(), AttestError> {
        self.write_csv(std::io::BufWriter::new(std::fs::File::create(path)?))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, AttestError> {
        Self::read_csv(std::fs::File::open(path)?)
    }
}

/// Operator update of a device reference, e.g. after a firmware upgrade.
/// The trusted file must parse before it replaces `target`; the swap goes
/// through a temporary file and a rename.
pub fn accept_reference(
    trusted: &Path,
    target: &Path,
) -> Result<ReferenceMeasurement, AttestError> {
    let reference = ReferenceMeasurement::load(trusted)?;
    let mut tmp = target.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    reference.save(&tmp)?;
    std::fs::rename(&tmp, target)?;
    Ok(reference)
}

#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Challenge(pub [u8; 32]);

impl fmt::Display for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for Challenge {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Challenge({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationRequest {
    pub challenge: Challenge,
    pub device_mac: Mac,
    /// Microseconds since the epoch.
    pub issued_at: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DeviceState {
    Healthy,
    Infected,
}

impl DeviceState {
    fn as_byte(self) -> u8 {
        match self {
            DeviceState::Healthy => 0,
            DeviceState::Infected => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum DivergenceKind {
    NewProcess,
    DigestMismatch,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Divergence {
    pub path: String,
    pub kind: DivergenceKind,
    /// `None` when a referenced process is not running.
    pub observed_digest: Option<Digest>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AttestationReport {
    pub challenge: Challenge,
    pub device_mac: Mac,
    pub verdict: DeviceState,
    pub divergences: Vec<Divergence>,
    pub signature: Vec<u8>,
}

#[derive(Serialize)]
struct CanonicalDivergence<'a> {
    path: &'a str,
    kind: DivergenceKind,
    observed_digest: String,
}

/// Canonical JSON for the divergence list: an array of
/// `{"path","kind","observed_digest"}` objects in the given order, digests as
/// lowercase hex (empty string when absent), no whitespace.
pub fn canonical_divergences_json(divergences: &[Divergence]) -> String {
    let items: Vec<CanonicalDivergence> = divergences
        .iter()
        .map(|d| CanonicalDivergence {
            path: &d.path,
            kind: d.kind,
            observed_digest: d.observed_digest.map(hex::encode).unwrap_or_default(),
        })
        .collect();
    serde_json::to_string(&items).expect("divergences serialize")
}

/// Bytes covered by the signature: `challenge || verdict byte || canonical JSON of divergences`.
pub fn signed_bytes(
    challenge: &Challenge,
    verdict: DeviceState,
    divergences: &[Divergence],
) -> Vec<u8> {
    let json = canonical_divergences_json(divergences);
    let mut out = Vec::with_capacity(33 + json.len());
    out.extend_from_slice(&challenge.0);
    out.push(verdict.as_byte());
    out.extend_from_slice(json.as_bytes());
    out
}

/// Device signing key (Ed25519).
#[derive(Clone)]
pub struct DeviceKey(SigningKey);

impl fmt::Debug for DeviceKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DeviceKey({})", self.public())
    }
}

impl DeviceKey {
    pub fn generate<R: RngCore>(rng: &mut R) -> Self {
        let mut seed = [0u8; 32];
        rng.fill_bytes(&mut seed);
        DeviceKey(SigningKey::from_bytes(&seed))
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        DeviceKey(SigningKey::from_bytes(&seed))
    }

    pub fn from_hex(s: &str) -> Result<Self, AttestError> {
        let bytes = hex::decode(s.trim()).map_err(|e| AttestError::BadKey(e.to_string()))?;
        let seed: [u8; 32] = bytes
            .try_into()
            .map_err(|_| AttestError::BadKey("secret key must be 32 bytes".into()))?;
        Ok(Self::from_seed(seed))
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0.to_bytes())
    }

    pub fn public(&self) -> DevicePublicKey {
        DevicePublicKey(self.0.verifying_key())
    }

    pub fn sign(&self, msg: &[u8]) -> Vec<u8> {
        self.0.sign(msg).to_bytes().to_vec()
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct DevicePublicKey(VerifyingKey);

impl fmt::Display for DevicePublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0.as_bytes()))
    }
}

impl fmt::Debug for DevicePublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DevicePublicKey({self})")
    }
}

impl DevicePublicKey {
    pub fn from_hex(s: &str) -> Result<Self, AttestError> {
        let bytes = hex::decode(s.trim()).map_err(|e| AttestError::BadKey(e.to_string()))?;
        let bytes: [u8; 32] = bytes
            .try_into()
            .map_err(|_| AttestError::BadKey("public key must be 32 bytes".into()))?;
        VerifyingKey::from_bytes(&bytes)
            .map(DevicePublicKey)
            .map_err(|e| AttestError::BadKey(e.to_string()))
    }

    pub fn verify(&self, msg: &[u8], signature: &[u8]) -> bool {
        let Ok(sig) = Signature::from_slice(signature) else {
            return false;
        };
        self.0.verify_strict(msg, &sig).is_ok()
    }
}

/// Measures the table, compares with the reference and signs the outcome.
///
/// Divergences are sorted by path: binaries absent from the reference are
/// `NEW_PROCESS`; changed binaries and referenced binaries that are not
/// running are `DIGEST_MISMATCH`.
pub fn attest(
    table: &ProcessTable,
    reference: &ReferenceMeasurement,
    request: &AttestationRequest,
    key: &DeviceKey,
) -> AttestationReport {
    let measured = measure(table);
    let mut divergences = Vec::new();
    for (path, digest) in &measured {
        match reference.expected.get(path) {
            None => divergences.push(Divergence {
                path: path.clone(),
                kind: DivergenceKind::NewProcess,
                observed_digest: Some(*digest),
            }),
            Some(expected) if expected != digest => divergences.push(Divergence {
                path: path.clone(),
                kind: DivergenceKind::DigestMismatch,
                observed_digest: Some(*digest),
            }),
            Some(_) => {}
        }
    }
    for path in reference.expected.keys() {
        if !measured.contains_key(path) {
            divergences.push(Divergence {
                path: path.clone(),
                kind: DivergenceKind::DigestMismatch,
                observed_digest: None,
            });
        }
    }
    divergences.sort();
    let verdict = if divergences.is_empty() {
        DeviceState::Healthy
    } else {
        DeviceState::Infected
    };
    let signature = key.sign(&signed_bytes(&request.challenge, verdict, &divergences));
    AttestationReport {
        challenge: request.challenge,
        device_mac: request.device_mac,
        verdict,
        divergences,
        signature,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum VerifyError {
    #[error("report signature does not verify")]
    BadSignature,
    #[error("challenge does not match an outstanding request")]
    StaleChallenge,
    #[error("no report within the deadline")]
    Timeout,
    #[error("verdict disagrees with the divergence list")]
    InconsistentReport,
}

/// Stateless check: signature under `key`, then challenge and device
/// binding to `request`, then verdict consistency.
pub fn verify_report(
    report: &AttestationReport,
    request: &AttestationRequest,
    key: &DevicePublicKey,
) -> Result<(), VerifyError> {
    let msg = signed_bytes(&report.challenge, report.verdict, &report.divergences);
    if !key.verify(&msg, &report.signature) {
        return Err(VerifyError::BadSignature);
    }
    if report.challenge != request.challenge || report.device_mac != request.device_mac {
        return Err(VerifyError::StaleChallenge);
    }
    let healthy = report.verdict == DeviceState::Healthy;
    if healthy != report.divergences.is_empty() {
        return Err(VerifyError::InconsistentReport);
    }
    Ok(())
}

/// Gateway-side challenge bookkeeping and key registry.
pub struct Verifier {
    keys: HashMap<Mac, DevicePublicKey>,
    outstanding: HashMap<Challenge, AttestationRequest>,
    consumed: HashSet<Challenge>,
    rng: StdRng,
    deadline_micros: u64,
}

impl Verifier {
    pub fn new() -> Self {
        Self::with_rng(StdRng::from_entropy())
    }

    /// Deterministic challenges, for reproducible tests.
    pub fn seeded(seed: u64) -> Self {
        Self::with_rng(StdRng::seed_from_u64(seed))
    }

    fn with_rng(rng: StdRng) -> Self {
        Verifier {
            keys: HashMap::new(),
            outstanding: HashMap::new(),
            consumed: HashSet::new(),
            rng,
            deadline_micros: DEFAULT_DEADLINE_MICROS,
        }
    }

    pub fn with_deadline(mut self, micros: u64) -> Self {
        self.deadline_micros = micros;
        self
    }

    pub fn deadline_micros(&self) -> u64 {
        self.deadline_micros
    }

    pub fn register(&mut self, mac: Mac, key: DevicePublicKey) {
        self.keys.insert(mac, key);
    }

    pub fn key(&self, mac: &Mac) -> Option<&DevicePublicKey> {
        self.keys.get(mac)
    }

    /// Draws a challenge never issued before in this session.
    pub fn issue(&mut self, device_mac: Mac, now: u64) -> AttestationRequest {
        let challenge = loop {
            let mut bytes = [0u8; 32];
            self.rng.fill_bytes(&mut bytes);
            let c = Challenge(bytes);
            if !self.outstanding.contains_key(&c) && !self.consumed.contains(&c) {
                break c;
            }
        };
        let request = AttestationRequest {
            challenge,
            device_mac,
            issued_at: now,
        };
        self.outstanding.insert(challenge, request.clone());
        request
    }

    /// Checks a report received at `now`. Any outcome other than a bad
    /// signature consumes the challenge.
    pub fn verify(
        &mut self,
        report: &AttestationReport,
        request: &AttestationRequest,
        now: u64,
    ) -> Result<(), VerifyError> {
        let key = self
            .keys
            .get(&report.device_mac)
            .ok_or(VerifyError::BadSignature)?;
        let msg = signed_bytes(&report.challenge, report.verdict, &report.divergences);
        if !key.verify(&msg, &report.signature) {
            return Err(VerifyError::BadSignature);
        }
        let live = self.outstanding.get(&request.challenge) == Some(request);
        if !live || report.challenge != request.challenge || report.device_mac != request.device_mac
        {
            return Err(VerifyError::StaleChallenge);
        }
        self.outstanding.remove(&request.challenge);
        self.consumed.insert(request.challenge);
        if now.saturating_sub(request.issued_at) > self.deadline_micros {
            return Err(VerifyError::Timeout);
        }
        if (report.verdict == DeviceState::Healthy) != report.divergences.is_empty() {
            return Err(VerifyError::InconsistentReport);
        }
        Ok(())
    }

    /// Retires a request whose report never arrived.
    pub fn expire(&mut self, request: &AttestationRequest) {
        if self.outstanding.remove(&request.challenge).is_some() {
            self.consumed.insert(request.challenge);
        }
    }

    pub fn outstanding(&self) -> usize {
        self.outstanding.len()
    }
}

impl Default for Verifier {
    fn default() -> Self {
        Self::new()
    }
}
