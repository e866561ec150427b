//! Run-level accounting: mechanical counters, per-exchange outcomes
//! for availability measurements, attack-phase records, and the MitM
//! interception audit.

use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use crate::engine::SimTime;

/// Low-level event counters, useful for tests and diagnostics.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct NetCounters {
    pub frames_emitted: u64,
    pub switch_deliveries: u64,
    pub bucket_drops: u64,
    pub l2_ignored: u64,
    pub misdelivered: u64,
    pub arp_requests: u64,
    pub arp_failures: u64,
    pub routed_in: u64,
    pub routed_out: u64,
    pub ttl_drops: u64,
    pub no_route: u64,
    pub echo_requests: u64,
    pub unmatched_replies: u64,
    pub icmp_errors_received: u64,
    pub igmp_received: u64,
    pub udp_unhandled: u64,
    pub backlog_drops: u64,
    pub rst_for_unknown: u64,
    pub embryonic_reaped: u64,
}

/// One benign application exchange, as observed by the client lane.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize)]
pub enum ExchangeOutcome {
    Success,
    Failure,
}

/// A completed or failed client exchange record.
#[derive(Debug, Clone, serde::Serialize)]
pub struct ExchangeRecord {
    /// Lane identifier, e.g. "http:user-03".
    pub lane: String,
    pub started: SimTime,
    pub finished: SimTime,
    pub outcome: ExchangeOutcome,
}

/// One attack-phase interval, recorded by the attacker agent.
#[derive(Debug, Clone, serde::Serialize)]
pub struct PhaseRecord {
    pub name: String,
    pub start: SimTime,
    pub end: SimTime,
    /// Packets this phase emitted (floods count every frame).
    pub emitted: u64,
}

/// Interception audit for the man-in-the-middle scenario: once armed,
/// counts victim↔router IP packets and how many carried the relay mark.
#[derive(Debug, Clone, serde::Serialize)]
pub struct MitmAudit {
    pub window_start: SimTime,
    pub victims: BTreeSet<Ipv4Addr>,
    pub pair_packets: u64,
    pub relayed_packets: u64,
}

impl MitmAudit {
    pub fn diversion_ratio(&self) -> f64 {
        if self.pair_packets == 0 {
            0.0
        } else {
            self.relayed_packets as f64 / self.pair_packets as f64
        }
    }
}

/// One credential attempt in the brute-force scenario.
#[derive(Debug, Clone, serde::Serialize)]
pub struct BfAttempt {
    pub service: String,
    pub target: Ipv4Addr,
    pub username: String,
    pub password: String,
    pub started: SimTime,
    pub finished: SimTime,
    pub success: bool,
}

/// Aggregated results of one simulation run.
#[derive(Debug, Default, serde::Serialize)]
pub struct RunStats {
    pub counters: NetCounters,
    pub exchanges: Vec<ExchangeRecord>,
    pub phases: Vec<PhaseRecord>,
    pub mitm_audit: Option<MitmAudit>,
    pub bf_attempts: Vec<BfAttempt>,
}

impl RunStats {
    /// Success ratio of exchanges for lanes whose name starts with
    /// `prefix`, over the window `[from, to)`.
    pub fn success_ratio(&self, prefix: &str, from: SimTime, to: SimTime) -> Option<f64> {
        let mut total = 0u64;
        let mut ok = 0u64;
        for record in &self.exchanges {
            if !record.lane.starts_with(prefix) {
                continue;
            }
            if record.started < from || record.started >= to {
                continue;
            }
            total += 1;
            if record.outcome == ExchangeOutcome::Success {
                ok += 1;
            }
        }
        if total == 0 {
            None
        } else {
            Some(ok as f64 / total as f64)
        }
    }
}
