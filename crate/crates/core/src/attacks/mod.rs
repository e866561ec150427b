//! The attacker: a User-LAN host running scripted phases against the
//! rest of the network — reconnaissance scans, ARP-poisoning
//! man-in-the-middle with live relay, PSH-ACK and ICMP/IGMP floods, a
//! TCP connection killer, and sequential credential brute-force.
//!
//! Phases are engine-scheduled state machines executing alongside the
//! benign lanes; every frame the attacker puts on the wire carries the
//! active phase's label in its provenance.

mod agent;

pub use agent::AttackerAgent;

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use crate::capture::LabelTag;
use crate::engine::{RngStream, SimTime};
use crate::netmodel::{Cidr, MacAddress, ServiceKind};
use crate::protocols::Endpoint;

/// Ordered credential candidates for brute-force phases. The success
/// index is where the harness plants the server's real pair; the
/// attacker itself never reads it — it just tries pairs in order and
/// stops when a login works.
#[derive(Debug, Clone, serde::Serialize)]
pub struct Wordlist {
    pub pairs: Vec<(String, String)>,
    pub success_index: Option<usize>,
}

const WORDLIST_USERS: [&str; 8] = [
    "admin", "root", "ubuntu", "operator", "backup", "test", "guest", "svc-backup",
];

const WORDLIST_BASES: [&str; 20] = [
    "123456",
    "password",
    "letmein",
    "qwerty",
    "dragon",
    "monkey",
    "master",
    "shadow",
    "summer",
    "winter",
    "welcome",
    "login",
    "pass",
    "abc123",
    "secret",
    "changeme",
    "hunter",
    "access",
    "trust",
    "service",
];

impl Wordlist {
    /// Deterministic candidate list: `len` distinct pairs plus a drawn
    /// success index. The pair at that index is what the scenario
    /// installs as the target's real credential.
    pub fn generate(seed: u64, stream: &str, len: usize) -> Wordlist {
        let mut rng = RngStream::new(seed, &format!("wordlist:{stream}"));
        let mut pairs = Vec::with_capacity(len);
        for i in 0..len {
            let user = WORDLIST_USERS[rng.draw_range(0, WORDLIST_USERS.len() as u64) as usize];
            let base = WORDLIST_BASES[rng.draw_range(0, WORDLIST_BASES.len() as u64) as usize];
            // The running index keeps every candidate distinct, so the
            // first success is necessarily at the planted index.
            pairs.push((user.to_string(), format!("{base}{i:03}")));
        }
        let success_index = if len == 0 {
            None
        } else {
            Some(rng.draw_range(0, len as u64) as usize)
        };
        Wordlist {
            pairs,
            success_index,
        }
    }

    /// The pair the harness should install on the target server.
    pub fn planted_pair(&self) -> Option<&(String, String)> {
        self.success_index.and_then(|i| self.pairs.get(i))
    }
}

/// Coarse OS family readable from a reply's time-to-live.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum OsGuess {
    Windows,
    Linux,
}

impl OsGuess {
    /// Initial TTLs of 128 mark Windows, 64 mark Linux; anything the
    /// router decremented still sits above the halfway point.
    pub fn from_ttl(ttl: u8) -> OsGuess {
        if ttl > 64 {
            OsGuess::Windows
        } else {
            OsGuess::Linux
        }
    }
}

/// What the scan learned about one responsive address.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ScanHost {
    pub ip: Ipv4Addr,
    /// Link-layer address, known only for hosts swept by ARP.
    pub mac: Option<MacAddress>,
    /// Reply TTL as observed (after any router decrement).
    pub ttl: Option<u8>,
    pub os: Option<OsGuess>,
    /// Ports that answered SYN with SYN|ACK, with a service guess.
    pub open_ports: Vec<(u16, Option<ServiceKind>)>,
    /// Probed ports that answered with RST.
    pub closed_ports: u32,
}

impl ScanHost {
    fn new(ip: Ipv4Addr) -> ScanHost {
        ScanHost {
            ip,
            mac: None,
            ttl: None,
            os: None,
            open_ports: Vec::new(),
            closed_ports: 0,
        }
    }
}

/// Result of a network_scan phase.
#[derive(Debug, Clone, Default, serde::Serialize)]
pub struct ScanReport {
    pub hosts: BTreeMap<Ipv4Addr, ScanHost>,
    pub probes_sent: u64,
}

impl ScanReport {
    pub(crate) fn entry(&mut self, ip: Ipv4Addr) -> &mut ScanHost {
        self.hosts.entry(ip).or_insert_with(|| ScanHost::new(ip))
    }

    pub fn open_ports(&self, ip: Ipv4Addr) -> Vec<u16> {
        self.hosts
            .get(&ip)
            .map(|h| h.open_ports.iter().map(|(p, _)| *p).collect())
            .unwrap_or_default()
    }
}

/// One diverted frame the man-in-the-middle saw and passed on.
#[derive(Debug, Clone, serde::Serialize)]
pub struct LootRecord {
    pub at: SimTime,
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub protocol: u8,
    pub src_port: u16,
    pub dst_port: u16,
    pub bytes: usize,
}

/// One connection torn down by the TCP killer.
#[derive(Debug, Clone, serde::Serialize)]
pub struct KillRecord {
    pub at: SimTime,
    pub a: Endpoint,
    pub b: Endpoint,
}

/// One subnet the scanner walks, with the TCP ports probed on every
/// responsive address (empty = discovery sweep only).
#[derive(Debug, Clone)]
pub struct ScanTarget {
    pub subnet: Cidr,
    pub ports: Vec<u16>,
}

/// What one phase does. Absolute `until` times bound the open-ended
/// phases; scans and brute-force end on their own.
#[derive(Debug, Clone)]
pub enum PhaseSpec {
    /// ARP-sweep local subnets / ICMP-sweep remote ones, then SYN-probe
    /// responders' ports; half-open (stack RSTs every SYN|ACK).
    Scan {
        targets: Vec<ScanTarget>,
        probe_gap: SimTime,
    },
    /// Periodic forged is-at rounds against (victim, peer) pairs, live
    /// relay of diverted traffic, corrective re-ARP at phase end.
    Poison {
        pairs: Vec<(Ipv4Addr, Ipv4Addr)>,
        period: SimTime,
        until: SimTime,
        /// Arm the interception audit one period after the first round.
        audit: bool,
    },
    PshAckFlood {
        target: Ipv4Addr,
        port: u16,
        rate: u64,
        until: SimTime,
        /// Stamp each packet with a random source address instead of
        /// the attacker's own.
        spoof: bool,
    },
    IcmpIgmpFlood {
        target: Ipv4Addr,
        rate: u64,
        icmp_fraction: f64,
        until: SimTime,
        /// Stamp each packet with a random source address instead of
        /// the attacker's own.
        spoof: bool,
    },
    /// Poison for visibility, then RST every connection observed
    /// established through the relay.
    TcpKill {
        pairs: Vec<(Ipv4Addr, Ipv4Addr)>,
        period: SimTime,
        until: SimTime,
    },
    /// Sequential credential attempts; stops at first success.
    BruteForce {
        service: ServiceKind,
        target: Ipv4Addr,
        port: u16,
        wordlist: Wordlist,
        interval: SimTime,
    },
}

impl PhaseSpec {
    pub fn label(&self) -> LabelTag {
        match self {
            PhaseSpec::Scan { .. } => LabelTag::MitmScan,
            PhaseSpec::Poison { .. } => LabelTag::MitmArp,
            PhaseSpec::PshAckFlood { .. } => LabelTag::DosPshAck,
            PhaseSpec::IcmpIgmpFlood { .. } => LabelTag::DosIcmpIgmp,
            PhaseSpec::TcpKill { .. } => LabelTag::DosTcpKill,
            PhaseSpec::BruteForce { service, .. } => match service {
                ServiceKind::Ftp => LabelTag::BfFtp,
                _ => LabelTag::BfSsh,
            },
        }
    }
}

/// When a phase begins: at an absolute time, or a fixed gap after the
/// previous phase completes (how the brute-force sleep is expressed).
#[derive(Debug, Clone, Copy)]
pub enum PhaseStart {
    At(SimTime),
    AfterPrevious { gap: SimTime },
}

#[derive(Debug, Clone)]
pub struct PlannedPhase {
    pub start: PhaseStart,
    pub spec: PhaseSpec,
}

#[cfg(test)]
mod tests;
