//! Device-side agent and the channels the gateway uses to reach it.

use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

use crate::packet::Mac;

use super::wire::{self, Message, WireError};
use super::{
    attest, AttestError, AttestationReport, AttestationRequest, DeviceKey, ProcessTable,
    ReferenceMeasurement,
};

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("no response before the deadline")]
    Timeout,
    #[error("unexpected message from peer")]
    UnexpectedMessage,
    #[error("connection closed before a report arrived")]
    Closed,
    #[error(transparent)]
    Wire(#[from] WireError),
    #[error(transparent)]
    Attest(#[from] AttestError),
    #[error(transparent)]
    Io(std::io::Error),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        match e.kind() {
            std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut => {
                TransportError::Timeout
            }
            _ => TransportError::Io(e),
        }
    }
}

#[derive(Debug, Clone)]
enum ProcessSource {
    Table(ProcessTable),
    Dir(PathBuf),
}

/// Prover for one simulated device.
#[derive(Debug, Clone)]
pub struct Agent {
    mac: Mac,
    key: DeviceKey,
    reference: ReferenceMeasurement,
    reference_path: Option<PathBuf>,
    source: ProcessSource,
}

impl Agent {
    /// Agent over an in-memory process table.
    pub fn new(
        mac: Mac,
        key: DeviceKey,
        reference: ReferenceMeasurement,
        table: ProcessTable,
    ) -> Self {
        Agent {
            mac,
            key,
            reference,
            reference_path: None,
            source: ProcessSource::Table(table),
        }
    }

    /// Agent whose process table is re-read from `dir` on every attestation.
    pub fn from_dir(
        mac: Mac,
        key: DeviceKey,
        reference: ReferenceMeasurement,
        dir: PathBuf,
    ) -> Self {
        Agent {
            mac,
            key,
            reference,
            reference_path: None,
            source: ProcessSource::Dir(dir),
        }
    }

    pub fn mac(&self) -> Mac {
        self.mac
    }

    pub fn key(&self) -> &DeviceKey {
        &self.key
    }

    pub fn reference(&self) -> &ReferenceMeasurement {
        &self.reference
    }

    pub fn set_reference(&mut self, reference: ReferenceMeasurement) {
        self.reference = reference;
    }

    /// Re-reads the reference from `path` before every attestation, so an
    /// operator replacing the file takes effect without a restart.
    pub fn with_reference_file(mut self, path: PathBuf) -> Result<Self, AttestError> {
        self.reference = ReferenceMeasurement::load(&path)?;
        self.reference_path = Some(path);
        Ok(self)
    }

    /// In-memory table; `None` for directory-backed agents.
    pub fn table_mut(&mut self) -> Option<&mut ProcessTable> {
        match &mut self.source {
            ProcessSource::Table(t) => Some(t),
            ProcessSource::Dir(_) => None,
        }
    }

    pub fn current_table(&self) -> Result<ProcessTable, AttestError> {
        match &self.source {
            ProcessSource::Table(t) => Ok(t.clone()),
            ProcessSource::Dir(d) => ProcessTable::from_dir(d),
        }
    }

    pub fn handle(&self, request: &AttestationRequest) -> Result<AttestationReport, AttestError> {
        let table = self.current_table()?;
        match &self.reference_path {
            Some(path) => {
                let reference = ReferenceMeasurement::load(path)?;
                Ok(attest(&table, &reference, request, &self.key))
            }
            None => Ok(attest(&table, &self.reference, request, &self.key)),
        }
    }
}

/// Something that can carry a request to a device and bring back its report.
pub trait AttestationChannel {
    fn attest(&mut self, request: &AttestationRequest)
        -> Result<AttestationReport, TransportError>;
}

/// In-process channel. Messages still go through the wire codec.
#[derive(Debug, Clone)]
pub struct LoopbackChannel {
    agent: Arc<Mutex<Agent>>,
}

impl LoopbackChannel {
    pub fn new(agent: Agent) -> Self {
        LoopbackChannel {
            agent: Arc::new(Mutex::new(agent)),
        }
    }

    /// Handle for changing the device state while the channel is in use.
    pub fn agent(&self) -> Arc<Mutex<Agent>> {
        Arc::clone(&self.agent)
    }
}

impl AttestationChannel for LoopbackChannel {
    fn attest(
        &mut self,
        request: &AttestationRequest,
    ) -> Result<AttestationReport, TransportError> {
        let frame = wire::encode_message(&Message::Request(request.clone()));
        let Message::Request(received) = wire::decode_message(&frame)? else {
            return Err(TransportError::UnexpectedMessage);
        };
        let report = self
            .agent
            .lock()
            .expect("agent poisoned")
            .handle(&received)?;
        let frame = wire::encode_message(&Message::Report(report));
        match wire::decode_message(&frame)? {
            Message::Report(r) => Ok(r),
            Message::Request(_) => Err(TransportError::UnexpectedMessage),
        }
    }
}

/// A device that never answers.
#[derive(Debug, Default)]
pub struct UnresponsiveChannel;

impl AttestationChannel for UnresponsiveChannel {
    fn attest(
        &mut self,
        _request: &AttestationRequest,
    ) -> Result<AttestationReport, TransportError> {
        Err(TransportError::Timeout)
    }
}

/// Client for an agent listening on TCP; one connection per request.
#[derive(Debug, Clone)]
pub struct TcpChannel {
    pub addr: SocketAddr,
    pub timeout: Duration,
}

impl TcpChannel {
    pub fn new(addr: SocketAddr, timeout: Duration) -> Self {
        TcpChannel { addr, timeout }
    }
}

impl AttestationChannel for TcpChannel {
    fn attest(
        &mut self,
        request: &AttestationRequest,
    ) -> Result<AttestationReport, TransportError> {
        let mut stream = TcpStream::connect_timeout(&self.addr, self.timeout)?;
        stream.set_read_timeout(Some(self.timeout))?;
        stream.set_write_timeout(Some(self.timeout))?;
        wire::write_message(&mut stream, &Message::Request(request.clone()))?;
        match wire::read_message(&mut stream) {
            Ok(Some(Message::Report(r))) => Ok(r),
            Ok(Some(Message::Request(_))) => Err(TransportError::UnexpectedMessage),
            Ok(None) => Err(TransportError::Closed),
            Err(WireError::Io(e)) => Err(e.into()),
            Err(e) => Err(e.into()),
        }
    }
}

/// Answers every request on one connection until the peer closes it.
pub fn serve_connection(agent: &Agent, stream: &mut TcpStream) -> Result<usize, TransportError> {
    let mut answered = 0;
    while let Some(msg) = wire::read_message(stream)? {
        let Message::Request(request) = msg else {
            return Err(TransportError::UnexpectedMessage);
        };
        let report = agent.handle(&request)?;
        wire::write_message(stream, &Message::Report(report))?;
        answered += 1;
    }
    Ok(answered)
}

/// Serves connections one at a time. Stops after `max_connections` when
/// given; a failing connection is logged and does not stop the server.
pub fn serve(
    agent: &Agent,
    listener: &TcpListener,
    max_connections: Option<usize>,
) -> std::io::Result<()> {
    for (served, stream) in listener.incoming().enumerate() {
        let mut stream = stream?;
        match serve_connection(agent, &mut stream) {
            Ok(n) => log::debug!("answered {n} attestation requests"),
            Err(e) => log::warn!("attestation connection failed: {e}"),
        }
        if max_connections.is_some_and(|m| served + 1 >= m) {
            break;
        }
    }
    Ok(())
}
