//! Gateway-side IoT malware detection that pairs whitelist traffic analysis
//! with on-demand remote attestation.
//!
//! The pipeline: [`profiling`] learns per-device whitelists from benign
//! captures, [`monitoring`] classifies each live packet against them, and
//! [`orchestrator`] sends suspicious packets to the device's attester. A
//! healthy report whitelists the packet; an infected one raises an alert.

pub mod attestation;
pub mod dns;
pub mod monitoring;
pub mod orchestrator;
pub mod packet;
pub mod pcap;
pub mod profiling;
pub mod report;
pub mod scenario;
pub mod trace;

pub use packet::{Mac, PacketRecord, Transport};
pub use profiling::{
    DeviceProfile, Direction, HostnameMap, NetworkConfig, ProfileEntry, ProfileSet,
};
