//! Deterministic packet-level simulation of a small enterprise network.
//!
//! The crate models a three-LAN topology (service, user, and monitoring
//! subnets behind one router), drives benign application traffic and three
//! scripted attack scenarios over it, and captures the frames seen by a
//! mirror port into PCAP files with per-frame labels. A flow extractor
//! turns those captures into labeled CSV datasets for intrusion-detection
//! research.
//!
//! Everything is deterministic: a run is a pure function of the scenario
//! configuration and its seed, down to the bytes of the emitted files.

pub mod apps;
pub mod attacks;
pub mod capture;
pub mod engine;
pub mod flows;
pub mod netmodel;
pub mod protocols;
pub mod sim;

pub use capture::{AgentId, CaptureLog, CaptureRecord, LabelTag};
pub use engine::{EngineError, EventId, RngStream, Scheduler, SimTime};
pub use netmodel::{
    build_reference_topology, Cidr, Host, HostId, MacAddress, OsTag, Role, ServiceKind, Topology,
    TopologyConfig,
};
pub use protocols::{ArpMessage, EthernetFrame, Ipv4Packet, TcpSegment};
pub use sim::{Action, AgentHub, Net, Provenance, RunStats, World};
