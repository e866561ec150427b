use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use super::*;
use crate::capture::{AgentId, CaptureRecord, LabelTag};
use crate::engine::{RngStream, SimTime};
use crate::netmodel::MacAddress;
use crate::protocols::{
    encode_frame, EtherPayload, EthernetFrame, IcmpMessage, IgmpMessage, IpPayload, Ipv4Packet,
    TcpFlags, TcpSegment, UdpDatagram,
};

// ---------------------------------------------------------------------------
// Brute-force oracle
//
// An independent re-statement of the flow rules, deliberately naive:
// group packets by canonical key first, then split each group into
// flows by walking it, then compute every feature with two-pass
// arithmetic over the members. The production extractor must agree.

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct OracleKey {
    lo: (Ipv4Addr, u16),
    hi: (Ipv4Addr, u16),
    proto: u8,
}

#[derive(Debug, Clone, Copy)]
struct OraclePacket {
    ts: SimTime,
    src: (Ipv4Addr, u16),
    dst: (Ipv4Addr, u16),
    proto: u8,
    len: u64,
    flags: Option<TcpFlags>,
    label: LabelTag,
    order: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct OracleFlow {
    src: (Ipv4Addr, u16),
    dst: (Ipv4Addr, u16),
    proto: u8,
    members: Vec<usize>,
    start: SimTime,
    end: SimTime,
    label: LabelTag,
    fwd_pkts: u64,
    bwd_pkts: u64,
    fwd_bytes: u64,
    bwd_bytes: u64,
    fwd_len: (f64, f64, u64, u64),
    bwd_len: (f64, f64, u64, u64),
    fwd_iat: (f64, f64),
    bwd_iat: (f64, f64),
    flag_counts: [u64; 5],
}

fn oracle_packet(record: &CaptureRecord, order: usize) -> Option<Result<OraclePacket, ()>> {
    let decoded = match crate::protocols::decode_frame(&record.bytes) {
        Ok(d) => d,
        Err(_) => return Some(Err(())),
    };
    match decoded.frame.payload {
        EtherPayload::Ipv4(packet) => {
            let (sp, dp, flags) = match &packet.payload {
                IpPayload::Tcp(t) => (t.src_port, t.dst_port, Some(t.flags)),
                IpPayload::Udp(u) => (u.src_port, u.dst_port, None),
                _ => (0, 0, None),
            };
            Some(Ok(OraclePacket {
                ts: record.timestamp,
                src: (packet.src, sp),
                dst: (packet.dst, dp),
                proto: packet.payload.protocol(),
                len: packet.total_length() as u64,
                flags,
                label: record.label,
                order,
            }))
        }
        _ => None,
    }
}

fn two_pass_stats(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / values.len() as f64;
    let var = values
        .iter()
        .map(|v| (v - mean) * (v - mean))
        .sum::<f64>()
        / values.len() as f64;
    (mean, var.sqrt())
}

fn oracle_finish(packets: &[OraclePacket], members: Vec<usize>) -> OracleFlow {
    let first = &packets[members[0]];
    let initiator = first.src;
    let mut fwd: Vec<&OraclePacket> = Vec::new();
    let mut bwd: Vec<&OraclePacket> = Vec::new();
    for &m in &members {
        if packets[m].src == initiator {
            fwd.push(&packets[m]);
        } else {
            bwd.push(&packets[m]);
        }
    }
    let dir_len = |side: &[&OraclePacket]| -> (f64, f64, u64, u64) {
        if side.is_empty() {
            return (0.0, 0.0, 0, 0);
        }
        let lens: Vec<f64> = side.iter().map(|p| p.len as f64).collect();
        let (mean, std) = two_pass_stats(&lens);
        let min = side.iter().map(|p| p.len).min().unwrap();
        let max = side.iter().map(|p| p.len).max().unwrap();
        (mean, std, min, max)
    };
    let dir_iat = |side: &[&OraclePacket]| -> (f64, f64) {
        if side.len() < 2 {
            return (0.0, 0.0);
        }
        let diffs: Vec<f64> = side
            .windows(2)
            .map(|w| (w[1].ts.as_nanos() - w[0].ts.as_nanos()) as f64)
            .collect();
        two_pass_stats(&diffs)
    };
    let mut flag_counts = [0u64; 5];
    for &m in &members {
        if let Some(flags) = packets[m].flags {
            for (slot, bit) in [
                TcpFlags::SYN,
                TcpFlags::ACK,
                TcpFlags::PSH,
                TcpFlags::FIN,
                TcpFlags::RST,
            ]
            .into_iter()
            .enumerate()
            {
                if flags.contains(bit) {
                    flag_counts[slot] += 1;
                }
            }
        }
    }
    // Label: benign unless any member is malicious; then the malicious
    // majority, ties to the earliest-seen label.
    let mut tallies: BTreeMap<LabelTag, (u64, usize)> = BTreeMap::new();
    for &m in &members {
        let label = packets[m].label;
        if label != LabelTag::Benign {
            let entry = tallies.entry(label).or_insert((0, packets[m].order));
            entry.0 += 1;
        }
    }
    let label = tallies
        .iter()
        .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then(b.1 .1.cmp(&a.1 .1)))
        .map(|(l, _)| *l)
        .unwrap_or(LabelTag::Benign);
    OracleFlow {
        src: initiator,
        dst: if first.src == initiator {
            first.dst
        } else {
            first.src
        },
        proto: first.proto,
        start: first.ts,
        end: packets[*members.last().unwrap()].ts,
        label,
        fwd_pkts: fwd.len() as u64,
        bwd_pkts: bwd.len() as u64,
        fwd_bytes: fwd.iter().map(|p| p.len).sum(),
        bwd_bytes: bwd.iter().map(|p| p.len).sum(),
        fwd_len: dir_len(&fwd),
        bwd_len: dir_len(&bwd),
        fwd_iat: dir_iat(&fwd),
        bwd_iat: dir_iat(&bwd),
        flag_counts,
        members,
    }
}

/// The quadratic reference: group by key, split each group by the
/// boundary rules, finish features, then interleave every flow back
/// into first-packet order.
fn oracle_flows(
    records: &[CaptureRecord],
    idle: SimTime,
    active: SimTime,
) -> (Vec<OracleFlow>, BTreeMap<LabelTag, u64>) {
    let mut arp: BTreeMap<LabelTag, u64> = BTreeMap::new();
    let mut packets: Vec<OraclePacket> = Vec::new();
    for record in records {
        match oracle_packet(record, packets.len()) {
            Some(Ok(p)) => packets.push(p),
            Some(Err(())) => {}
            None => {
                if matches!(
                    crate::protocols::decode_frame(&record.bytes).map(|d| d.frame.payload),
                    Ok(EtherPayload::Arp(_))
                ) {
                    *arp.entry(record.label).or_insert(0) += 1;
                }
            }
        }
    }
    let mut groups: BTreeMap<OracleKey, Vec<usize>> = BTreeMap::new();
    for (i, p) in packets.iter().enumerate() {
        let key = if p.src <= p.dst {
            OracleKey {
                lo: p.src,
                hi: p.dst,
                proto: p.proto,
            }
        } else {
            OracleKey {
                lo: p.dst,
                hi: p.src,
                proto: p.proto,
            }
        };
        groups.entry(key).or_default().push(i);
    }
    let mut flows: Vec<OracleFlow> = Vec::new();
    for (key, group) in groups {
        let mut current: Vec<usize> = Vec::new();
        let mut fins = (false, false);
        let mut closed_by_rst_or_ack = false;
        for &i in &group {
            let p = &packets[i];
            if !current.is_empty() {
                let start = packets[current[0]].ts;
                let last = packets[*current.last().unwrap()].ts;
                let fin_complete = fins.0 && fins.1;
                let syn_only_restart = fin_complete
                    && p.flags.map_or(false, |f| f.contains(TcpFlags::SYN));
                if closed_by_rst_or_ack
                    || syn_only_restart
                    || p.ts - last > idle
                    || p.ts - start > active
                {
                    flows.push(oracle_finish(&packets, std::mem::take(&mut current)));
                    fins = (false, false);
                    closed_by_rst_or_ack = false;
                }
            }
            let initiator = if current.is_empty() {
                p.src
            } else {
                packets[current[0]].src
            };
            current.push(i);
            if key.proto == 6 {
                if let Some(flags) = p.flags {
                    if flags.contains(TcpFlags::FIN) {
                        if p.src == initiator {
                            fins.0 = true;
                        } else {
                            fins.1 = true;
                        }
                    }
                    if flags.contains(TcpFlags::RST) {
                        closed_by_rst_or_ack = true;
                    } else if fins.0 && fins.1 && !flags.contains(TcpFlags::FIN) {
                        // The segment after both FINs (the final ACK)
                        // joins the flow and seals it.
                        closed_by_rst_or_ack = true;
                    }
                }
            }
        }
        if !current.is_empty() {
            flows.push(oracle_finish(&packets, current));
        }
    }
    flows.sort_by_key(|f| (f.start, f.members[0]));
    (flows, arp)
}

// ---------------------------------------------------------------------------
// Frame builders for synthetic captures

const LABELS: [LabelTag; 4] = [
    LabelTag::Benign,
    LabelTag::DosPshAck,
    LabelTag::DosTcpKill,
    LabelTag::MitmArp,
];

fn mac(n: u8) -> MacAddress {
    MacAddress([0x02, 0, 0, 0, 0, n])
}

fn frame_bytes(packet: Ipv4Packet) -> Vec<u8> {
    encode_frame(&EthernetFrame {
        dst: mac(1),
        src: mac(2),
        payload: EtherPayload::Ipv4(packet),
    })
}

fn tcp_record(
    index: u64,
    ts: SimTime,
    src: (Ipv4Addr, u16),
    dst: (Ipv4Addr, u16),
    flags: TcpFlags,
    payload_len: usize,
    label: LabelTag,
) -> CaptureRecord {
    let segment = TcpSegment {
        src_port: src.1,
        dst_port: dst.1,
        seq: 1000 + index as u32,
        ack: 500,
        flags,
        window: 65535,
        checksum: 0,
        payload: vec![0x61; payload_len],
    };
    let packet = Ipv4Packet::new(src.0, dst.0, 64, index as u16, IpPayload::Tcp(segment));
    CaptureRecord {
        index,
        timestamp: ts,
        bytes: frame_bytes(packet),
        agent: AgentId(0),
        label,
    }
}

fn ping_record(
    index: u64,
    ts: SimTime,
    src: Ipv4Addr,
    dst: Ipv4Addr,
    label: LabelTag,
) -> CaptureRecord {
    let message = IcmpMessage::echo_request(7, index as u16, vec![0u8; 16]);
    let packet = Ipv4Packet::new(src, dst, 64, index as u16, IpPayload::Icmp(message));
    CaptureRecord {
        index,
        timestamp: ts,
        bytes: frame_bytes(packet),
        agent: AgentId(0),
        label,
    }
}

fn ip(s: &str) -> Ipv4Addr {
    s.parse().unwrap()
}

fn secs(s: u64) -> SimTime {
    SimTime::from_secs(s)
}

const IDLE: SimTime = SimTime::from_secs(120);
const ACTIVE: SimTime = SimTime::from_secs(1800);

// ---------------------------------------------------------------------------
// Behavior pinned by example

#[test]
fn one_tcp_conversation_is_one_flow() {
    let a = (ip("10.0.0.1"), 40000);
    let b = (ip("10.0.0.2"), 80);
    let t = |ms| SimTime::from_millis(ms);
    let records = vec![
        tcp_record(0, t(0), a, b, TcpFlags::SYN, 0, LabelTag::Benign),
        tcp_record(1, t(1), b, a, TcpFlags::SYN | TcpFlags::ACK, 0, LabelTag::Benign),
        tcp_record(2, t(2), a, b, TcpFlags::ACK, 0, LabelTag::Benign),
        tcp_record(3, t(3), a, b, TcpFlags::PSH | TcpFlags::ACK, 120, LabelTag::Benign),
        tcp_record(4, t(4), b, a, TcpFlags::PSH | TcpFlags::ACK, 310, LabelTag::Benign),
        tcp_record(5, t(5), a, b, TcpFlags::FIN | TcpFlags::ACK, 0, LabelTag::Benign),
        tcp_record(6, t(6), b, a, TcpFlags::ACK, 0, LabelTag::Benign),
        tcp_record(7, t(7), b, a, TcpFlags::FIN | TcpFlags::ACK, 0, LabelTag::Benign),
        tcp_record(8, t(8), a, b, TcpFlags::ACK, 0, LabelTag::Benign),
    ];
    let out = extract_flows(&records, IDLE, ACTIVE);
    assert_eq!(out.flows.len(), 1);
    let flow = &out.flows[0];
    assert_eq!(flow.src, crate::protocols::Endpoint::new(a.0, a.1));
    assert_eq!(flow.dst, crate::protocols::Endpoint::new(b.0, b.1));
    assert_eq!(flow.fwd.pkts, 5);
    assert_eq!(flow.bwd.pkts, 4);
    assert_eq!(flow.fwd.syn, 1, "one SYN forward");
    assert_eq!(flow.bwd.syn, 1, "one SYN backward");
    assert_eq!(flow.fwd.fin, 1);
    assert_eq!(flow.bwd.fin, 1);
    assert_eq!(flow.label, LabelTag::Benign);
    assert_eq!(flow.start, t(0));
    assert_eq!(flow.end, t(8), "the final ACK seals the flow");
}

#[test]
fn teardown_then_reuse_starts_a_second_flow() {
    let a = (ip("10.0.0.1"), 40000);
    let b = (ip("10.0.0.2"), 80);
    let t = |ms| SimTime::from_millis(ms);
    let mut records = vec![
        tcp_record(0, t(0), a, b, TcpFlags::SYN, 0, LabelTag::Benign),
        tcp_record(1, t(1), b, a, TcpFlags::SYN | TcpFlags::ACK, 0, LabelTag::Benign),
        tcp_record(2, t(2), a, b, TcpFlags::FIN | TcpFlags::ACK, 0, LabelTag::Benign),
        tcp_record(3, t(3), b, a, TcpFlags::FIN | TcpFlags::ACK, 0, LabelTag::Benign),
        tcp_record(4, t(4), a, b, TcpFlags::ACK, 0, LabelTag::Benign),
    ];
    // Same tuple reused: the SYN must open a second flow even though
    // no timeout elapsed.
    records.push(tcp_record(5, t(10), a, b, TcpFlags::SYN, 0, LabelTag::Benign));
    records.push(tcp_record(
        6,
        t(11),
        b,
        a,
        TcpFlags::SYN | TcpFlags::ACK,
        0,
        LabelTag::Benign,
    ));
    let out = extract_flows(&records, IDLE, ACTIVE);
    assert_eq!(out.flows.len(), 2);
    assert_eq!(out.flows[0].fwd.pkts + out.flows[0].bwd.pkts, 5);
    assert_eq!(out.flows[1].fwd.pkts + out.flows[1].bwd.pkts, 2);
}

#[test]
fn rst_closes_and_belongs_to_the_flow() {
    let a = (ip("10.0.0.1"), 40000);
    let b = (ip("10.0.0.2"), 80);
    let t = |ms| SimTime::from_millis(ms);
    let records = vec![
        tcp_record(0, t(0), a, b, TcpFlags::SYN, 0, LabelTag::Benign),
        tcp_record(1, t(1), b, a, TcpFlags::SYN | TcpFlags::ACK, 0, LabelTag::Benign),
        tcp_record(2, t(2), a, b, TcpFlags::ACK, 0, LabelTag::Benign),
        tcp_record(3, t(3), a, b, TcpFlags::RST, 0, LabelTag::DosTcpKill),
        tcp_record(4, t(4), a, b, TcpFlags::SYN, 0, LabelTag::Benign),
    ];
    let out = extract_flows(&records, IDLE, ACTIVE);
    assert_eq!(out.flows.len(), 2);
    let killed = &out.flows[0];
    assert_eq!(killed.fwd.rst, 1, "the killing RST is a member");
    assert_eq!(killed.end, t(3));
    assert_eq!(
        killed.label,
        LabelTag::DosTcpKill,
        "one malicious packet flips the flow label"
    );
    assert_eq!(out.flows[1].fwd.pkts, 1);
}

#[test]
fn idle_gap_splits_pings() {
    let records = vec![
        ping_record(0, secs(0), ip("10.0.0.1"), ip("10.0.0.2"), LabelTag::Benign),
        ping_record(1, secs(200), ip("10.0.0.1"), ip("10.0.0.2"), LabelTag::Benign),
    ];
    let out = extract_flows(&records, IDLE, ACTIVE);
    assert_eq!(out.flows.len(), 2, "200 s gap with 120 s idle timeout");
    // Exactly at the threshold stays joined.
    let records = vec![
        ping_record(0, secs(0), ip("10.0.0.1"), ip("10.0.0.2"), LabelTag::Benign),
        ping_record(1, secs(120), ip("10.0.0.1"), ip("10.0.0.2"), LabelTag::Benign),
    ];
    assert_eq!(extract_flows(&records, IDLE, ACTIVE).flows.len(), 1);
}

#[test]
fn active_timeout_cuts_a_long_flow() {
    let src = ip("10.0.0.1");
    let dst = ip("10.0.0.2");
    let mut records = Vec::new();
    for i in 0..40u64 {
        records.push(ping_record(i, secs(i * 60), src, dst, LabelTag::Benign));
    }
    let out = extract_flows(&records, IDLE, ACTIVE);
    // 60 s spacing never trips idle; age does at >1800 s: packets at
    // 0..=1800 s (31 of them) then a fresh flow restarts the clock.
    assert_eq!(out.flows.len(), 2);
    assert_eq!(out.flows[0].fwd.pkts, 31);
    assert_eq!(out.flows[1].fwd.pkts, 9);
}

#[test]
fn single_packet_flow_has_zeroed_statistics() {
    let message = UdpDatagram {
        src_port: 50000,
        dst_port: 123,
        checksum: 0,
        payload: vec![0u8; 48],
    };
    let packet = Ipv4Packet::new(ip("10.0.0.1"), ip("10.0.0.2"), 64, 9, IpPayload::Udp(message));
    let records = vec![CaptureRecord {
        index: 0,
        timestamp: secs(5),
        bytes: frame_bytes(packet),
        agent: AgentId(0),
        label: LabelTag::Benign,
    }];
    let out = extract_flows(&records, IDLE, ACTIVE);
    assert_eq!(out.flows.len(), 1);
    let flow = &out.flows[0];
    assert_eq!(flow.end - flow.start, SimTime::ZERO);
    assert_eq!(flow.bwd.pkts, 0);
    assert_eq!(flow.fwd.iat_mean, 0.0);
    assert_eq!(flow.fwd.iat_std, 0.0);
    assert_eq!(flow.bwd.len_mean, 0.0);
    assert_eq!(flow.fwd.len_min, flow.fwd.len_max);
    assert_eq!(flow.fwd.bytes, 20 + 8 + 48);
}

#[test]
fn arp_is_excluded_but_tallied() {
    let arp_frame = EthernetFrame {
        dst: MacAddress::BROADCAST,
        src: mac(2),
        payload: EtherPayload::Arp(crate::protocols::ArpMessage::who_has(
            mac(2),
            ip("10.0.0.1"),
            ip("10.0.0.2"),
        )),
    };
    let records = vec![
        CaptureRecord {
            index: 0,
            timestamp: secs(0),
            bytes: encode_frame(&arp_frame),
            agent: AgentId(1),
            label: LabelTag::MitmArp,
        },
        CaptureRecord {
            index: 1,
            timestamp: secs(0),
            bytes: encode_frame(&arp_frame),
            agent: AgentId(0),
            label: LabelTag::Benign,
        },
        ping_record(2, secs(1), ip("10.0.0.1"), ip("10.0.0.2"), LabelTag::Benign),
    ];
    let out = extract_flows(&records, IDLE, ACTIVE);
    assert_eq!(out.flows.len(), 1);
    assert_eq!(out.arp_counts[&LabelTag::MitmArp], 1);
    assert_eq!(out.arp_counts[&LabelTag::Benign], 1);
}

#[test]
fn majority_label_wins_with_first_seen_tiebreak() {
    let a = (ip("10.0.0.1"), 40000);
    let b = (ip("10.0.0.2"), 80);
    let t = |ms| SimTime::from_millis(ms);
    // Two DosTcpKill vs one DosPshAck: majority.
    let records = vec![
        tcp_record(0, t(0), a, b, TcpFlags::ACK, 0, LabelTag::DosPshAck),
        tcp_record(1, t(1), a, b, TcpFlags::ACK, 0, LabelTag::DosTcpKill),
        tcp_record(2, t(2), a, b, TcpFlags::ACK, 0, LabelTag::DosTcpKill),
    ];
    assert_eq!(
        extract_flows(&records, IDLE, ACTIVE).flows[0].label,
        LabelTag::DosTcpKill
    );
    // One of each: the earlier-seen label wins the tie.
    let records = vec![
        tcp_record(0, t(0), a, b, TcpFlags::ACK, 0, LabelTag::DosTcpKill),
        tcp_record(1, t(1), a, b, TcpFlags::ACK, 0, LabelTag::DosPshAck),
    ];
    assert_eq!(
        extract_flows(&records, IDLE, ACTIVE).flows[0].label,
        LabelTag::DosTcpKill
    );
}

// ---------------------------------------------------------------------------
// Randomized oracle equivalence

/// Random mix of TCP/UDP/ICMP/IGMP/ARP records over a small address
/// pool, with timestamp gaps occasionally straddling both timeouts.
fn random_capture(seed: u64, count: usize) -> Vec<CaptureRecord> {
    let mut rng = RngStream::new(seed, "flowgen");
    let ips: Vec<Ipv4Addr> = (1..=4u8).map(|n| Ipv4Addr::new(10, 0, 0, n)).collect();
    let ports = [80u16, 123, 4000, 4001];
    let mut records = Vec::with_capacity(count);
    let mut now = SimTime::ZERO;
    for i in 0..count {
        let step = match rng.draw_range(0, 100) {
            0..=79 => SimTime::from_millis(rng.draw_range(0, 2000)),
            80..=95 => SimTime::from_secs(rng.draw_range(30, 150)),
            _ => SimTime::from_secs(rng.draw_range(150, 2100)),
        };
        now = now + step;
        let label = LABELS[rng.draw_range(0, LABELS.len() as u64) as usize];
        let src = ips[rng.draw_range(0, 4) as usize];
        let mut dst = ips[rng.draw_range(0, 4) as usize];
        if dst == src {
            dst = ips[(rng.draw_range(0, 3) as usize + 1 + ips.iter().position(|x| *x == src).unwrap()) % 4];
        }
        let record = match rng.draw_range(0, 10) {
            0..=4 => {
                let sp = ports[rng.draw_range(0, 4) as usize];
                let dp = ports[rng.draw_range(0, 4) as usize];
                let flags = match rng.draw_range(0, 8) {
                    0 => TcpFlags::SYN,
                    1 => TcpFlags::SYN | TcpFlags::ACK,
                    2 => TcpFlags::FIN | TcpFlags::ACK,
                    3 => TcpFlags::RST,
                    4 => TcpFlags::PSH | TcpFlags::ACK,
                    _ => TcpFlags::ACK,
                };
                let len = rng.draw_range(0, 300) as usize;
                tcp_record(i as u64, now, (src, sp), (dst, dp), flags, len, label)
            }
            5..=6 => {
                let message = UdpDatagram {
                    src_port: ports[rng.draw_range(0, 4) as usize],
                    dst_port: ports[rng.draw_range(0, 4) as usize],
                    checksum: 0,
                    payload: vec![0u8; rng.draw_range(0, 200) as usize],
                };
                let packet =
                    Ipv4Packet::new(src, dst, 64, i as u16, IpPayload::Udp(message));
                CaptureRecord {
                    index: i as u64,
                    timestamp: now,
                    bytes: frame_bytes(packet),
                    agent: AgentId(0),
                    label,
                }
            }
            7 => ping_record(i as u64, now, src, dst, label),
            8 => {
                let packet = Ipv4Packet::new(
                    src,
                    dst,
                    64,
                    i as u16,
                    IpPayload::Igmp(IgmpMessage::v2_report(Ipv4Addr::new(224, 0, 0, 22))),
                );
                CaptureRecord {
                    index: i as u64,
                    timestamp: now,
                    bytes: frame_bytes(packet),
                    agent: AgentId(0),
                    label,
                }
            }
            _ => CaptureRecord {
                index: i as u64,
                timestamp: now,
                bytes: encode_frame(&EthernetFrame {
                    dst: MacAddress::BROADCAST,
                    src: mac(2),
                    payload: EtherPayload::Arp(crate::protocols::ArpMessage::who_has(
                        mac(2),
                        src,
                        dst,
                    )),
                }),
                agent: AgentId(0),
                label,
            },
        };
        records.push(record);
    }
    records
}

fn close_f64(a: f64, b: f64) -> bool {
    let diff = (a - b).abs();
    diff <= 1e-9 * a.abs().max(b.abs()).max(1.0)
}

fn assert_matches_oracle(records: &[CaptureRecord], idle: SimTime, active: SimTime) {
    let got = extract_flows(records, idle, active);
    let (want, want_arp) = oracle_flows(records, idle, active);
    assert_eq!(got.arp_counts, want_arp, "arp tallies diverge");
    assert_eq!(
        got.flows.len(),
        want.len(),
        "flow count diverges from the oracle"
    );
    for (g, w) in got.flows.iter().zip(&want) {
        assert_eq!((g.src.ip, g.src.port), w.src, "initiator");
        assert_eq!((g.dst.ip, g.dst.port), w.dst, "responder");
        assert_eq!(g.protocol, w.proto);
        assert_eq!(g.start, w.start);
        assert_eq!(g.end, w.end);
        assert_eq!(g.label, w.label);
        assert_eq!(g.fwd.pkts, w.fwd_pkts);
        assert_eq!(g.bwd.pkts, w.bwd_pkts);
        assert_eq!(g.fwd.bytes, w.fwd_bytes);
        assert_eq!(g.bwd.bytes, w.bwd_bytes);
        assert_eq!(g.fwd.len_min, w.fwd_len.2);
        assert_eq!(g.fwd.len_max, w.fwd_len.3);
        assert_eq!(g.bwd.len_min, w.bwd_len.2);
        assert_eq!(g.bwd.len_max, w.bwd_len.3);
        assert!(close_f64(g.fwd.len_mean, w.fwd_len.0), "fwd len mean");
        assert!(close_f64(g.fwd.len_std, w.fwd_len.1), "fwd len std");
        assert!(close_f64(g.bwd.len_mean, w.bwd_len.0), "bwd len mean");
        assert!(close_f64(g.bwd.len_std, w.bwd_len.1), "bwd len std");
        assert!(close_f64(g.fwd.iat_mean, w.fwd_iat.0), "fwd iat mean");
        assert!(close_f64(g.fwd.iat_std, w.fwd_iat.1), "fwd iat std");
        assert!(close_f64(g.bwd.iat_mean, w.bwd_iat.0), "bwd iat mean");
        assert!(close_f64(g.bwd.iat_std, w.bwd_iat.1), "bwd iat std");
        let got_flags = [
            g.fwd.syn + g.bwd.syn,
            g.fwd.ack + g.bwd.ack,
            g.fwd.psh + g.bwd.psh,
            g.fwd.fin + g.bwd.fin,
            g.fwd.rst + g.bwd.rst,
        ];
        assert_eq!(got_flags, w.flag_counts);
        // Partition invariants along the way.
        assert!(g.fwd.pkts >= 1, "first packet is always forward");
        if g.fwd.pkts > 0 {
            assert!(g.fwd.len_min as f64 <= g.fwd.len_mean + 1e-9);
            assert!(g.fwd.len_mean <= g.fwd.len_max as f64 + 1e-9);
        }
    }
    // Conservation: every IP packet landed in exactly one flow.
    let ip_packets = records
        .iter()
        .filter(|r| {
            matches!(
                crate::protocols::decode_frame(&r.bytes).map(|d| d.frame.payload),
                Ok(EtherPayload::Ipv4(_))
            )
        })
        .count() as u64;
    let assigned: u64 = got.flows.iter().map(|f| f.fwd.pkts + f.bwd.pkts).sum();
    assert_eq!(assigned, ip_packets);
}

#[test]
fn extractor_matches_the_oracle_on_random_captures() {
    for seed in 0..100u64 {
        let records = random_capture(seed, 400);
        assert_matches_oracle(&records, IDLE, ACTIVE);
    }
}

#[test]
fn extractor_matches_the_oracle_with_tight_timeouts() {
    for seed in 200..230u64 {
        let records = random_capture(seed, 500);
        assert_matches_oracle(
            &records,
            SimTime::from_secs(45),
            SimTime::from_secs(300),
        );
    }
}

// ---------------------------------------------------------------------------
// CSV emission

#[test]
fn csv_header_and_shape_are_pinned() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flows.csv");
    emit_flow_csv(&[], &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(
        text,
        "flow_id,src_ip,dst_ip,src_port,dst_port,protocol,start_ns,duration_ns,\
         fwd_pkts,bwd_pkts,fwd_bytes,bwd_bytes,\
         fwd_len_mean,fwd_len_std,fwd_len_min,fwd_len_max,\
         bwd_len_mean,bwd_len_std,bwd_len_min,bwd_len_max,\
         fwd_iat_mean,fwd_iat_std,bwd_iat_mean,bwd_iat_std,\
         syn_cnt,ack_cnt,psh_cnt,fin_cnt,rst_cnt,label\n"
    );

    let a = (ip("10.0.0.1"), 40000);
    let b = (ip("10.0.0.2"), 80);
    let t = |ms| SimTime::from_millis(ms);
    let records = vec![
        tcp_record(0, t(0), a, b, TcpFlags::SYN, 0, LabelTag::Benign),
        tcp_record(1, t(7), b, a, TcpFlags::SYN | TcpFlags::ACK, 0, LabelTag::Benign),
        tcp_record(2, t(9), a, b, TcpFlags::ACK, 40, LabelTag::Benign),
    ];
    let out = extract_flows(&records, IDLE, ACTIVE);
    emit_flow_csv(&out.flows, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines = text.lines();
    lines.next();
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row.len(), 30);
    assert_eq!(row[0], "0");
    assert_eq!(row[1], "10.0.0.1");
    assert_eq!(row[2], "10.0.0.2");
    assert_eq!(row[3], "40000");
    assert_eq!(row[4], "80");
    assert_eq!(row[5], "6");
    assert_eq!(row[6], "0");
    assert_eq!(row[7], "9000000");
    assert_eq!(row[8], "2", "fwd pkts");
    assert_eq!(row[9], "1", "bwd pkts");
    assert_eq!(row[10], "120", "two 40- and 80-byte IP packets forward");
    assert_eq!(row[12], "60.000000", "fwd len mean renders 6 decimals");
    assert_eq!(row[14], "40");
    assert_eq!(row[15], "80");
    assert_eq!(row[20], "9000000.000000", "fwd iat mean in ns");
    assert_eq!(row[24], "2", "syn count sums both directions");
    assert_eq!(row[29], "BENIGN");
    assert!(lines.next().is_none());
}

#[test]
fn arp_sidecar_rows_follow_label_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("flows.csv");
    let mut counts = BTreeMap::new();
    counts.insert(LabelTag::MitmArp, 42u64);
    counts.insert(LabelTag::Benign, 7u64);
    let sidecar = arp_sidecar_path(&path);
    assert_eq!(sidecar.file_name().unwrap(), "flows.arp.csv");
    write_arp_sidecar(&counts, &sidecar).unwrap();
    let text = std::fs::read_to_string(&sidecar).unwrap();
    assert_eq!(text, "label,count\nBENIGN,7\nMITM_ARP,42\n");
}
