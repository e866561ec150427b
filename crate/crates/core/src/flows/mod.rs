//! Flow extraction: folds a labeled frame capture into bidirectional
//! flow records with direction-split size and timing features.
//!
//! A flow is keyed by the canonical 5-tuple (the (ip, port) endpoint
//! pair sorted, plus IP protocol; non-TCP/UDP traffic uses port 0 on
//! both sides). The first packet of a flow fixes the forward
//! direction. A flow ends when
//!
//! - a packet for its key arrives more than `idle` after the previous
//!   one, or more than `active` after the flow started (the newcomer
//!   begins the next flow),
//! - a TCP RST joins it (the RST belongs to the flow it kills),
//! - or, after both directions have sent FIN, the next non-FIN segment
//!   joins it and seals it (the final ACK of an orderly close), with a
//!   later SYN on the same tuple always starting a fresh flow.
//!
//! Feature math runs on streaming Welford accumulators so a flow's
//! memory cost is constant no matter how many packets it absorbs; the
//! flood scenarios funnel ~10^5 packets into a single flow. Statistics
//! are population moments; flows with fewer than two same-direction
//! packets report zero mean/std where no sample exists.
//!
//! ARP never forms flows. It is tallied per label into a sidecar count
//! table so the capture's link-layer attack evidence (ARP poisoning)
//! stays visible next to the flow table.

use std::collections::BTreeMap;
use std::io::{BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};

use crate::capture::{CaptureError, CaptureRecord, LabelTag};
use crate::engine::SimTime;
use crate::protocols::{decode_frame, Endpoint, EtherPayload, IpPayload, TcpFlags};

#[cfg(test)]
mod tests;

/// Default idle timeout: a quiet tuple is considered finished after
/// two minutes without traffic.
pub const DEFAULT_IDLE_TIMEOUT: SimTime = SimTime::from_secs(120);

/// Default active timeout: long-lived conversations are cut into
/// 30-minute records so features stay bounded.
pub const DEFAULT_ACTIVE_TIMEOUT: SimTime = SimTime::from_secs(1800);

/// Per-direction packet features of a finished flow.
#[derive(Debug, Clone, Copy, PartialEq, Default, serde::Serialize)]
pub struct DirStats {
    pub pkts: u64,
    pub bytes: u64,
    pub len_mean: f64,
    pub len_std: f64,
    pub len_min: u64,
    pub len_max: u64,
    pub iat_mean: f64,
    pub iat_std: f64,
    pub syn: u64,
    pub ack: u64,
    pub psh: u64,
    pub fin: u64,
    pub rst: u64,
}

/// One finished bidirectional flow.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct FlowRecord {
    pub id: u64,
    /// Initiator endpoint: the source of the flow's first packet.
    pub src: Endpoint,
    pub dst: Endpoint,
    pub protocol: u8,
    pub start: SimTime,
    pub end: SimTime,
    pub fwd: DirStats,
    pub bwd: DirStats,
    pub label: LabelTag,
}

/// Everything `extract_flows` produces from one capture.
#[derive(Debug, Clone, Default)]
pub struct FlowExtract {
    pub flows: Vec<FlowRecord>,
    /// ARP frames per label; ARP carries no IP header and never joins
    /// a flow.
    pub arp_counts: BTreeMap<LabelTag, u64>,
    /// Decodable frames that were neither IPv4 nor ARP.
    pub non_ip: u64,
    /// Frames the codec rejected.
    pub undecodable: u64,
}

// ---------------------------------------------------------------------------
// Streaming accumulators

/// Welford one-pass moments over a sample stream.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: u64,
    mean: f64,
    m2: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1;
        let d = x - self.mean;
        self.mean += d / self.n as f64;
        self.m2 += d * (x - self.mean);
    }

    fn mean(&self) -> f64 {
        if self.n == 0 {
            0.0
        } else {
            self.mean
        }
    }

    /// Population standard deviation; zero when under two samples.
    fn std(&self) -> f64 {
        if self.n < 2 {
            0.0
        } else {
            (self.m2 / self.n as f64).sqrt()
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct DirAcc {
    pkts: u64,
    bytes: u64,
    len: Moments,
    len_min: u64,
    len_max: u64,
    iat: Moments,
    last_ts: SimTime,
    syn: u64,
    ack: u64,
    psh: u64,
    fin: u64,
    rst: u64,
}

impl DirAcc {
    fn push(&mut self, ts: SimTime, len: u64, flags: Option<TcpFlags>) {
        if self.pkts > 0 {
            self.iat.push((ts - self.last_ts).as_nanos() as f64);
            self.len_min = self.len_min.min(len);
            self.len_max = self.len_max.max(len);
        } else {
            self.len_min = len;
            self.len_max = len;
        }
        self.pkts += 1;
        self.bytes += len;
        self.len.push(len as f64);
        self.last_ts = ts;
        if let Some(flags) = flags {
            self.syn += u64::from(flags.contains(TcpFlags::SYN));
            self.ack += u64::from(flags.contains(TcpFlags::ACK));
            self.psh += u64::from(flags.contains(TcpFlags::PSH));
            self.fin += u64::from(flags.contains(TcpFlags::FIN));
            self.rst += u64::from(flags.contains(TcpFlags::RST));
        }
    }

    fn finish(self) -> DirStats {
        DirStats {
            pkts: self.pkts,
            bytes: self.bytes,
            len_mean: self.len.mean(),
            len_std: self.len.std(),
            len_min: if self.pkts == 0 { 0 } else { self.len_min },
            len_max: self.len_max,
            iat_mean: self.iat.mean(),
            iat_std: self.iat.std(),
            syn: self.syn,
            ack: self.ack,
            psh: self.psh,
            fin: self.fin,
            rst: self.rst,
        }
    }
}

// ---------------------------------------------------------------------------
// Assembly

type Half = (Ipv4Addr, u16);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct FlowKey {
    lo: Half,
    hi: Half,
    protocol: u8,
}

impl FlowKey {
    fn canonical(src: Half, dst: Half, protocol: u8) -> FlowKey {
        if src <= dst {
            FlowKey { lo: src, hi: dst, protocol }
        } else {
            FlowKey { lo: dst, hi: src, protocol }
        }
    }
}

#[derive(Debug)]
struct OpenFlow {
    id: u64,
    initiator: Half,
    responder: Half,
    protocol: u8,
    start: SimTime,
    last: SimTime,
    fwd: DirAcc,
    bwd: DirAcc,
    fwd_fin: bool,
    bwd_fin: bool,
    /// Set once the flow can accept no further packet: an RST joined,
    /// or the post-FIN final segment did.
    sealed: bool,
    /// Malicious labels seen: count and first-seen packet ordinal.
    tallies: BTreeMap<LabelTag, (u64, u64)>,
}

impl OpenFlow {
    fn open(id: u64, src: Half, dst: Half, protocol: u8, ts: SimTime) -> OpenFlow {
        OpenFlow {
            id,
            initiator: src,
            responder: dst,
            protocol,
            start: ts,
            last: ts,
            fwd: DirAcc::default(),
            bwd: DirAcc::default(),
            fwd_fin: false,
            bwd_fin: false,
            sealed: false,
            tallies: BTreeMap::new(),
        }
    }

    fn absorb(
        &mut self,
        ts: SimTime,
        src: Half,
        len: u64,
        flags: Option<TcpFlags>,
        label: LabelTag,
        ordinal: u64,
    ) {
        let forward = src == self.initiator;
        if forward {
            self.fwd.push(ts, len, flags);
        } else {
            self.bwd.push(ts, len, flags);
        }
        self.last = ts;
        if label != LabelTag::Benign {
            self.tallies.entry(label).or_insert((0, ordinal)).0 += 1;
        }
        if let Some(flags) = flags {
            if flags.contains(TcpFlags::FIN) {
                if forward {
                    self.fwd_fin = true;
                } else {
                    self.bwd_fin = true;
                }
            }
            if flags.contains(TcpFlags::RST) {
                self.sealed = true;
            } else if self.fwd_fin && self.bwd_fin && !flags.contains(TcpFlags::FIN) {
                self.sealed = true;
            }
        }
    }

    /// Would this packet start a new flow instead of joining?
    fn must_rotate(&self, ts: SimTime, flags: Option<TcpFlags>, idle: SimTime, active: SimTime) -> bool {
        if self.sealed {
            return true;
        }
        if self.fwd_fin && self.bwd_fin && flags.is_some_and(|f| f.contains(TcpFlags::SYN)) {
            return true;
        }
        ts - self.last > idle || ts - self.start > active
    }

    fn finish(self) -> FlowRecord {
        let label = self
            .tallies
            .iter()
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
            .map(|(l, _)| *l)
            .unwrap_or(LabelTag::Benign);
        FlowRecord {
            id: self.id,
            src: Endpoint::new(self.initiator.0, self.initiator.1),
            dst: Endpoint::new(self.responder.0, self.responder.1),
            protocol: self.protocol,
            start: self.start,
            end: self.last,
            fwd: self.fwd.finish(),
            bwd: self.bwd.finish(),
            label,
        }
    }
}

/// Folds a capture into flow records plus ARP/odd-frame tallies.
///
/// Records must be in capture order (non-decreasing timestamps); flow
/// ids count up in the order flows were opened, which is also
/// ascending start-time order.
pub fn extract_flows(records: &[CaptureRecord], idle: SimTime, active: SimTime) -> FlowExtract {
    let mut out = FlowExtract::default();
    let mut open: BTreeMap<FlowKey, OpenFlow> = BTreeMap::new();
    let mut next_id = 0u64;
    let mut ordinal = 0u64;
    for record in records {
        let decoded = match decode_frame(&record.bytes) {
            Ok(d) => d,
            Err(_) => {
                out.undecodable += 1;
                continue;
            }
        };
        let packet = match decoded.frame.payload {
            EtherPayload::Ipv4(packet) => packet,
            EtherPayload::Arp(_) => {
                *out.arp_counts.entry(record.label).or_insert(0) += 1;
                continue;
            }
            EtherPayload::Other { .. } => {
                out.non_ip += 1;
                continue;
            }
        };
        let (src_port, dst_port, flags) = match &packet.payload {
            IpPayload::Tcp(t) => (t.src_port, t.dst_port, Some(t.flags)),
            IpPayload::Udp(u) => (u.src_port, u.dst_port, None),
            _ => (0, 0, None),
        };
        let src = (packet.src, src_port);
        let dst = (packet.dst, dst_port);
        let len = packet.total_length() as u64;
        let ts = record.timestamp;
        let key = FlowKey::canonical(src, dst, packet.payload.protocol());
        if let Some(flow) = open.get(&key) {
            if flow.must_rotate(ts, flags, idle, active) {
                out.flows.push(open.remove(&key).unwrap().finish());
            }
        }
        let flow = open.entry(key).or_insert_with(|| {
            let id = next_id;
            next_id += 1;
            OpenFlow::open(id, src, dst, key.protocol, ts)
        });
        flow.absorb(ts, src, len, flags, record.label, ordinal);
        ordinal += 1;
    }
    out.flows.extend(open.into_values().map(OpenFlow::finish));
    out.flows.sort_by_key(|f| f.id);
    out
}

// ---------------------------------------------------------------------------
// CSV emission

/// Column header of the flow table, one line, no spaces.
pub const FLOW_CSV_HEADER: &str = "flow_id,src_ip,dst_ip,src_port,dst_port,protocol,\
start_ns,duration_ns,fwd_pkts,bwd_pkts,fwd_bytes,bwd_bytes,\
fwd_len_mean,fwd_len_std,fwd_len_min,fwd_len_max,\
bwd_len_mean,bwd_len_std,bwd_len_min,bwd_len_max,\
fwd_iat_mean,fwd_iat_std,bwd_iat_mean,bwd_iat_std,\
syn_cnt,ack_cnt,psh_cnt,fin_cnt,rst_cnt,label";

/// Writes the flow table as CSV. An empty flow list still writes the
/// header so downstream loaders see a valid, empty table.
pub fn emit_flow_csv(flows: &[FlowRecord], path: &Path) -> Result<(), CaptureError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "{FLOW_CSV_HEADER}")?;
    for f in flows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{},{},{},{},{},\
             {:.6},{:.6},{},{},{:.6},{:.6},{},{},\
             {:.6},{:.6},{:.6},{:.6},{},{},{},{},{},{}",
            f.id,
            f.src.ip,
            f.dst.ip,
            f.src.port,
            f.dst.port,
            f.protocol,
            f.start.as_nanos(),
            (f.end - f.start).as_nanos(),
            f.fwd.pkts,
            f.bwd.pkts,
            f.fwd.bytes,
            f.bwd.bytes,
            f.fwd.len_mean,
            f.fwd.len_std,
            f.fwd.len_min,
            f.fwd.len_max,
            f.bwd.len_mean,
            f.bwd.len_std,
            f.bwd.len_min,
            f.bwd.len_max,
            f.fwd.iat_mean,
            f.fwd.iat_std,
            f.bwd.iat_mean,
            f.bwd.iat_std,
            f.fwd.syn + f.bwd.syn,
            f.fwd.ack + f.bwd.ack,
            f.fwd.psh + f.bwd.psh,
            f.fwd.fin + f.bwd.fin,
            f.fwd.rst + f.bwd.rst,
            f.label.as_str(),
        )?;
    }
    w.flush()?;
    Ok(())
}

/// Sidecar path for the ARP tally next to a flow CSV:
/// `flows.csv` -> `flows.arp.csv`.
pub fn arp_sidecar_path(flow_csv: &Path) -> PathBuf {
    let name = flow_csv
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_default();
    let sidecar = match name.strip_suffix(".csv") {
        Some(stem) => format!("{stem}.arp.csv"),
        None => format!("{name}.arp.csv"),
    };
    flow_csv.with_file_name(sidecar)
}

/// Writes the per-label ARP counts, rows in label declaration order,
/// zero-count labels omitted.
pub fn write_arp_sidecar(
    counts: &BTreeMap<LabelTag, u64>,
    path: &Path,
) -> Result<(), CaptureError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    writeln!(w, "label,count")?;
    for label in LabelTag::ALL {
        if let Some(count) = counts.get(&label) {
            if *count > 0 {
                writeln!(w, "{},{}", label.as_str(), count)?;
            }
        }
    }
    w.flush()?;
    Ok(())
}
