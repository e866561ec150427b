//! The attacker agent: one hub slot driving all attack phases.

use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use crate::capture::{AgentId, LabelTag};
use crate::engine::{RngStream, Scheduler, SimTime};
use crate::netmodel::{HostId, MacAddress, ServiceKind};
use crate::protocols::{
    ArpMessage, ArpOp, Endpoint, EtherPayload, EthernetFrame, IcmpMessage, IgmpMessage, IpPayload,
    Ipv4Packet, TcpEvent, TcpFlags, TcpSegment, ICMP_ECHO_REPLY,
};
use crate::sim::{
    Action, AgentNotice, BfAttempt, ConnKey, Net, PhaseRecord, Provenance, Tap,
};

use super::{
    KillRecord, LootRecord, OsGuess, PhaseSpec, PhaseStart, PlannedPhase, ScanReport, ScanTarget,
    Wordlist,
};

/// Echo identifier the scanner stamps on its sweep probes.
const SCAN_PING_ID: u16 = 0xbee5;
/// Echo identifier on flood pings.
const FLOOD_PING_ID: u16 = 0xdd05;
/// Quiet time after the last probe of a scan stage, letting straggler
/// replies arrive before the report is read.
const SCAN_SETTLE: SimTime = SimTime::from_millis(500);
/// Per-attempt ceiling in brute-force phases.
const BF_ATTEMPT_TIMEOUT: SimTime = SimTime::from_secs(10);
/// IGMPv3 membership-report multicast group used as flood filler.
const IGMP_REPORT_GROUP: Ipv4Addr = Ipv4Addr::new(224, 0, 0, 22);

// Timer token layout: kind in the high half, argument in the low half.
const TOK_PHASE: u64 = 1;
const TOK_SCAN: u64 = 2;
const TOK_POISON: u64 = 3;
const TOK_FLOOD: u64 = 4;
const TOK_PHASE_END: u64 = 5;
const TOK_BF: u64 = 6;
const TOK_BF_TIMEOUT: u64 = 7;

fn tok(kind: u64, arg: u64) -> u64 {
    (kind << 32) | (arg & 0xffff_ffff)
}

fn tok_kind(token: u64) -> u64 {
    token >> 32
}

fn tok_arg(token: u64) -> u64 {
    token & 0xffff_ffff
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ScanStage {
    Sweep,
    SweepSettle,
    Ports,
    PortsSettle,
}

#[derive(Debug, Clone, Copy)]
enum Probe {
    Arp(Ipv4Addr),
    Ping(Ipv4Addr),
    Syn(Ipv4Addr, u16),
}

struct ScanRun {
    targets: Vec<ScanTarget>,
    probes: Vec<Probe>,
    next: usize,
    gap: SimTime,
    stage: ScanStage,
    report: ScanReport,
    /// (ip, port) pairs probed, to classify replies.
    probed_ports: BTreeSet<(Ipv4Addr, u16)>,
    /// Open ports already recorded, to dedup.
    seen_open: BTreeSet<(Ipv4Addr, u16)>,
}

struct PoisonRun {
    pairs: Vec<(Ipv4Addr, Ipv4Addr)>,
    period: SimTime,
    until: SimTime,
}

struct FloodRun {
    until: SimTime,
    kind: FloodKind,
}

enum FloodKind {
    PshAck {
        target: Ipv4Addr,
        port: u16,
        rate: u64,
        spoof: bool,
    },
    IcmpIgmp {
        target: Ipv4Addr,
        rate: u64,
        icmp_fraction: f64,
        spoof: bool,
        seq: u16,
    },
}

/// Per-direction view of a tracked connection: the sequence number the
/// other side expects next, and whether a non-SYN ACK was seen.
#[derive(Debug, Clone, Copy, Default)]
struct DirTrack {
    next_seq: Option<u32>,
    synced: bool,
}

#[derive(Debug, Clone, Copy, Default)]
struct ConnTrack {
    fwd: DirTrack,
    bwd: DirTrack,
    killed: bool,
}

struct BfRun {
    service: ServiceKind,
    target: Endpoint,
    interval: SimTime,
    wordlist: Wordlist,
    attempt: usize,
    conn: Option<ConnKey>,
    buf: Vec<u8>,
    /// 0 = awaiting banner/greeting, 1 = credentials sent.
    stage: u8,
    attempt_started: SimTime,
}

enum ActivePhase {
    Scan(ScanRun),
    Poison(PoisonRun),
    Flood(FloodRun),
    Kill(PoisonRun),
    Bf(BfRun),
}

/// The attacker host's driver. One instance occupies one hub slot and
/// owns every malicious frame of the run.
pub struct AttackerAgent {
    host: HostId,
    agent_index: usize,
    agent_id: AgentId,
    mac: MacAddress,
    ips: Vec<Ipv4Addr>,
    rng: RngStream,
    phases: Vec<PlannedPhase>,
    phase: usize,
    active: Option<ActivePhase>,
    phase_started: SimTime,
    emitted_this_phase: u64,
    /// True link-layer addresses, seeded from configuration and
    /// extended by ARP sweeps.
    macs: BTreeMap<Ipv4Addr, MacAddress>,
    relay_on: bool,
    kill_armed: bool,
    tracks: BTreeMap<(Endpoint, Endpoint), ConnTrack>,
    /// Results, read by the scenario summary after the run.
    pub scan_report: Option<ScanReport>,
    pub loot: Vec<LootRecord>,
    pub kills: Vec<KillRecord>,
    pub relay_loop_drops: u64,
}

impl AttackerAgent {
    /// Registers the attacker with the network (provenance identity,
    /// tap) and prepares its phase plan. `macs` seeds the true
    /// link-layer table for poison targets the attacker has not
    /// ARP-scanned itself.
    pub fn new(
        net: &mut Net,
        host: HostId,
        agent_index: usize,
        phases: Vec<PlannedPhase>,
        macs: BTreeMap<Ipv4Addr, MacAddress>,
    ) -> AttackerAgent {
        let agent_id = net.register_agent("attacker");
        let iface = &net.topo.host(host).interfaces[0];
        let mac = iface.mac;
        let ips = net.topo.host(host).interfaces.iter().map(|i| i.ip).collect();
        let rng = RngStream::new(net.seed, "attacker");
        net.tap_hosts.insert(host);
        AttackerAgent {
            host,
            agent_index,
            agent_id,
            mac,
            ips,
            rng,
            phases,
            phase: 0,
            active: None,
            phase_started: SimTime::ZERO,
            emitted_this_phase: 0,
            macs,
            relay_on: false,
            kill_armed: false,
            tracks: BTreeMap::new(),
            scan_report: None,
            loot: Vec::new(),
            kills: Vec::new(),
            relay_loop_drops: 0,
        }
    }

    pub fn agent_id(&self) -> AgentId {
        self.agent_id
    }

    /// Schedules every absolutely-timed phase start.
    pub fn schedule_plan(&self, sched: &mut Scheduler<Action>) {
        for (index, planned) in self.phases.iter().enumerate() {
            if let PhaseStart::At(at) = planned.start {
                sched
                    .schedule(
                        at,
                        Action::AgentTimer {
                            agent: self.agent_index,
                            token: tok(TOK_PHASE, index as u64),
                        },
                    )
                    .expect("schedule phase start");
            }
        }
    }

    fn current_label(&self) -> LabelTag {
        self.phases
            .get(self.phase)
            .map(|p| p.spec.label())
            // Between/after phases the last label stays in force for
            // stragglers (e.g. teardown ACKs of a brute-force conn).
            .or_else(|| self.phases.last().map(|p| p.spec.label()))
            .unwrap_or(LabelTag::Benign)
    }

    fn prov(&self) -> Provenance {
        Provenance {
            agent: self.agent_id,
            label: self.current_label(),
            relayed: false,
        }
    }

    fn timer(&self, sched: &mut Scheduler<Action>, at: SimTime, token: u64) {
        sched
            .schedule(
                at,
                Action::AgentTimer {
                    agent: self.agent_index,
                    token,
                },
            )
            .expect("schedule attacker timer");
    }

    // -- frame helpers ----------------------------------------------------

    fn emit(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        frame: EthernetFrame,
        prov: Provenance,
    ) {
        self.emitted_this_phase += 1;
        net.emit_frame(sched, self.host, 0, frame, prov);
    }

    /// Raw IP emission with an arbitrary source address (the host send
    /// path would stamp the attacker's own), resolved to `dst_mac`.
    fn emit_ip_to_mac(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        dst_mac: MacAddress,
        src: Ipv4Addr,
        dst: Ipv4Addr,
        ttl: u8,
        payload: IpPayload,
    ) {
        let ident = self.rng.draw_range(0, 65536) as u16;
        let packet = Ipv4Packet::new(src, dst, ttl, ident, payload);
        let frame = EthernetFrame {
            dst: dst_mac,
            src: self.mac,
            payload: EtherPayload::Ipv4(packet),
        };
        let prov = self.prov();
        self.emit(net, sched, frame, prov);
    }

    fn send_routed(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        dst: Ipv4Addr,
        payload: IpPayload,
    ) {
        self.emitted_this_phase += 1;
        let prov = self.prov();
        net.send_ip_routed(sched, self.host, dst, payload, prov);
    }

    /// Flood emission: plain host send path, or — when spoofing — a raw
    /// frame with a random source address handed straight to the next
    /// hop. Spoofing needs the hop's MAC; until one is known (no scan
    /// ran, no config seed) packets go out unspoofed.
    fn flood_send(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        target: Ipv4Addr,
        payload: IpPayload,
        spoof: bool,
    ) {
        if spoof {
            if let Some(mac) = self.next_hop_mac(net, target) {
                let src = Ipv4Addr::from(self.rng.next_u64() as u32);
                self.emit_ip_to_mac(net, sched, mac, src, target, 64, payload);
                return;
            }
        }
        self.send_routed(net, sched, target, payload);
    }

    // -- phase lifecycle ---------------------------------------------------

    fn activate_phase(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        index: usize,
    ) {
        // A previous phase still running when its successor's absolute
        // start arrives is cut off here.
        if self.active.is_some() {
            self.finalize_phase(net, sched, now);
        }
        self.phase = index;
        self.phase_started = now;
        self.emitted_this_phase = 0;
        let spec = self.phases[index].spec.clone();
        net.attacker_label = Some(spec.label());
        match spec {
            PhaseSpec::Scan { targets, probe_gap } => {
                let local = net.topo.host(self.host).interfaces[0].subnet;
                let mut probes = Vec::new();
                for target in &targets {
                    let sweep_local = target.subnet == local;
                    for host_part in 1..=254u32 {
                        let ip = target.subnet.host(host_part);
                        if self.ips.contains(&ip) {
                            continue;
                        }
                        probes.push(if sweep_local {
                            Probe::Arp(ip)
                        } else {
                            Probe::Ping(ip)
                        });
                    }
                }
                self.active = Some(ActivePhase::Scan(ScanRun {
                    targets,
                    probes,
                    next: 0,
                    gap: probe_gap,
                    stage: ScanStage::Sweep,
                    report: ScanReport::default(),
                    probed_ports: BTreeSet::new(),
                    seen_open: BTreeSet::new(),
                }));
                self.scan_tick(net, sched, now);
            }
            PhaseSpec::Poison {
                pairs,
                period,
                until,
                audit,
            } => {
                if audit {
                    let victims: BTreeSet<Ipv4Addr> = pairs.iter().map(|(v, _)| *v).collect();
                    net.arm_mitm_audit(victims, now + period);
                }
                self.relay_on = true;
                self.active = Some(ActivePhase::Poison(PoisonRun {
                    pairs,
                    period,
                    until,
                }));
                self.poison_tick(net, sched, now);
                self.timer(sched, until, tok(TOK_PHASE_END, index as u64));
            }
            PhaseSpec::PshAckFlood {
                target,
                port,
                rate,
                until,
                spoof,
            } => {
                self.active = Some(ActivePhase::Flood(FloodRun {
                    until,
                    kind: FloodKind::PshAck {
                        target,
                        port,
                        rate,
                        spoof,
                    },
                }));
                self.flood_tick(net, sched, now);
            }
            PhaseSpec::IcmpIgmpFlood {
                target,
                rate,
                icmp_fraction,
                until,
                spoof,
            } => {
                self.active = Some(ActivePhase::Flood(FloodRun {
                    until,
                    kind: FloodKind::IcmpIgmp {
                        target,
                        rate,
                        icmp_fraction,
                        spoof,
                        seq: 0,
                    },
                }));
                self.flood_tick(net, sched, now);
            }
            PhaseSpec::TcpKill {
                pairs,
                period,
                until,
            } => {
                self.relay_on = true;
                self.kill_armed = true;
                self.tracks.clear();
                self.active = Some(ActivePhase::Kill(PoisonRun {
                    pairs,
                    period,
                    until,
                }));
                self.poison_tick(net, sched, now);
                self.timer(sched, until, tok(TOK_PHASE_END, index as u64));
            }
            PhaseSpec::BruteForce {
                service,
                target,
                port,
                wordlist,
                interval,
            } => {
                self.active = Some(ActivePhase::Bf(BfRun {
                    service,
                    target: Endpoint::new(target, port),
                    interval,
                    wordlist,
                    attempt: 0,
                    conn: None,
                    buf: Vec::new(),
                    stage: 0,
                    attempt_started: now,
                }));
                self.bf_start_attempt(net, sched, now);
            }
        }
    }

    fn finalize_phase(&mut self, net: &mut Net, sched: &mut Scheduler<Action>, now: SimTime) {
        let Some(active) = self.active.take() else {
            return;
        };
        match active {
            ActivePhase::Scan(run) => {
                self.scan_report = Some(run.report);
            }
            ActivePhase::Poison(run) => {
                self.corrective_rearp(net, sched, &run.pairs);
                // The relay stays on to drain diverted frames already
                // in flight; with true bindings restored nothing new
                // arrives.
            }
            ActivePhase::Kill(run) => {
                self.corrective_rearp(net, sched, &run.pairs);
                self.kill_armed = false;
            }
            ActivePhase::Flood(_) | ActivePhase::Bf(_) => {}
        }
        net.stats.phases.push(PhaseRecord {
            name: self.phases[self.phase].spec.label().as_str().to_string(),
            start: self.phase_started,
            end: now,
            emitted: self.emitted_this_phase,
        });
        self.phase += 1;
        if let Some(next) = self.phases.get(self.phase) {
            if let PhaseStart::AfterPrevious { gap } = next.start {
                self.timer(sched, now + gap, tok(TOK_PHASE, self.phase as u64));
            }
        }
    }

    // -- scan ---------------------------------------------------------------

    fn scan_tick(&mut self, net: &mut Net, sched: &mut Scheduler<Action>, now: SimTime) {
        let Some(ActivePhase::Scan(run)) = &mut self.active else {
            return;
        };
        if run.next >= run.probes.len() {
            match run.stage {
                ScanStage::Sweep => {
                    run.stage = ScanStage::SweepSettle;
                    self.timer(sched, now + SCAN_SETTLE, tok(TOK_SCAN, 0));
                }
                ScanStage::SweepSettle => {
                    // Build the port stage from responsive addresses.
                    let mut probes = Vec::new();
                    for target in &run.targets {
                        if target.ports.is_empty() {
                            continue;
                        }
                        for (&ip, _) in run
                            .report
                            .hosts
                            .iter()
                            .filter(|(ip, _)| target.subnet.contains(**ip))
                        {
                            for &port in &target.ports {
                                probes.push(Probe::Syn(ip, port));
                                run.probed_ports.insert((ip, port));
                            }
                        }
                    }
                    if probes.is_empty() {
                        self.finalize_phase(net, sched, now);
                        return;
                    }
                    run.probes = probes;
                    run.next = 0;
                    run.stage = ScanStage::Ports;
                    let gap = run.gap;
                    self.timer(sched, now + gap, tok(TOK_SCAN, 0));
                }
                ScanStage::Ports => {
                    run.stage = ScanStage::PortsSettle;
                    self.timer(sched, now + SCAN_SETTLE, tok(TOK_SCAN, 0));
                }
                ScanStage::PortsSettle => {
                    self.finalize_phase(net, sched, now);
                }
            }
            return;
        }
        let probe = run.probes[run.next];
        run.next += 1;
        let gap = run.gap;
        run.report.probes_sent += 1;
        match probe {
            Probe::Arp(ip) => {
                let message = ArpMessage::who_has(self.mac, self.ips[0], ip);
                let frame = EthernetFrame {
                    dst: MacAddress::BROADCAST,
                    src: self.mac,
                    payload: EtherPayload::Arp(message),
                };
                let prov = self.prov();
                self.emit(net, sched, frame, prov);
            }
            Probe::Ping(ip) => {
                let seq = (run.report.probes_sent & 0xffff) as u16;
                let message = IcmpMessage::echo_request(SCAN_PING_ID, seq, vec![0u8; 16]);
                self.send_routed(net, sched, ip, IpPayload::Icmp(message));
            }
            Probe::Syn(ip, port) => {
                let segment = TcpSegment {
                    src_port: self.rng.draw_range(40000, 60000) as u16,
                    dst_port: port,
                    seq: self.rng.next_u64() as u32,
                    ack: 0,
                    flags: TcpFlags::SYN,
                    window: 64240,
                    checksum: 0,
                    payload: Vec::new(),
                };
                self.send_routed(net, sched, ip, IpPayload::Tcp(segment));
            }
        }
        self.timer(sched, now + gap, tok(TOK_SCAN, 0));
    }

    /// Folds a frame into the scan report. Returns whether the frame
    /// was a reply to one of this scan's probes (it still passes to the
    /// stack either way — the stack's RST-for-unknown is exactly the
    /// half-open scanner's RST).
    fn scan_observe(&mut self, frame: &EthernetFrame) {
        let Some(ActivePhase::Scan(run)) = &mut self.active else {
            return;
        };
        match &frame.payload {
            EtherPayload::Arp(arp) => {
                if arp.op == ArpOp::IsAt {
                    self.macs.insert(arp.sender_ip, arp.sender_mac);
                    if run
                        .targets
                        .iter()
                        .any(|t| t.subnet.contains(arp.sender_ip))
                    {
                        let entry = run.report.entry(arp.sender_ip);
                        entry.mac = Some(arp.sender_mac);
                    }
                }
            }
            EtherPayload::Ipv4(packet) => match &packet.payload {
                IpPayload::Icmp(icmp)
                    if icmp.icmp_type == ICMP_ECHO_REPLY && icmp.id == SCAN_PING_ID =>
                {
                    let entry = run.report.entry(packet.src);
                    entry.ttl = Some(packet.ttl);
                    entry.os = Some(OsGuess::from_ttl(packet.ttl));
                }
                IpPayload::Tcp(segment)
                    if run.probed_ports.contains(&(packet.src, segment.src_port)) =>
                {
                    let key = (packet.src, segment.src_port);
                    if segment.flags.contains(TcpFlags::SYN | TcpFlags::ACK) {
                        if run.seen_open.insert(key) {
                            let guess = match segment.src_port {
                                21 => Some(ServiceKind::Ftp),
                                22 => Some(ServiceKind::Ssh),
                                80 => Some(ServiceKind::Http),
                                123 => Some(ServiceKind::Ntp),
                                _ => None,
                            };
                            let entry = run.report.entry(packet.src);
                            entry.open_ports.push((segment.src_port, guess));
                        }
                    } else if segment.flags.contains(TcpFlags::RST) {
                        let entry = run.report.entry(packet.src);
                        entry.closed_ports += 1;
                    }
                }
                _ => {}
            },
            EtherPayload::Other { .. } => {}
        }
    }

    // -- poison -------------------------------------------------------------

    fn poison_tick(&mut self, net: &mut Net, sched: &mut Scheduler<Action>, now: SimTime) {
        let (pairs, period, until) = match &self.active {
            Some(ActivePhase::Poison(run)) | Some(ActivePhase::Kill(run)) => {
                (run.pairs.clone(), run.period, run.until)
            }
            _ => return,
        };
        for (victim, peer) in &pairs {
            self.poison_pair(net, sched, *victim, *peer);
            self.poison_pair(net, sched, *peer, *victim);
        }
        if now + period < until {
            self.timer(sched, now + period, tok(TOK_POISON, 0));
        }
    }

    /// One forged reply: tells `to` that `about` lives at the attacker.
    fn poison_pair(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        to: Ipv4Addr,
        about: Ipv4Addr,
    ) {
        let Some(&to_mac) = self.macs.get(&to) else {
            return;
        };
        let message = ArpMessage::is_at(self.mac, about, to_mac, to);
        let frame = EthernetFrame {
            dst: to_mac,
            src: self.mac,
            payload: EtherPayload::Arp(message),
        };
        let prov = self.prov();
        self.emit(net, sched, frame, prov);
    }

    /// Restores true bindings at both ends of every poisoned pair.
    fn corrective_rearp(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        pairs: &[(Ipv4Addr, Ipv4Addr)],
    ) {
        for (victim, peer) in pairs {
            self.correct_pair(net, sched, *victim, *peer);
            self.correct_pair(net, sched, *peer, *victim);
        }
    }

    fn correct_pair(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        to: Ipv4Addr,
        about: Ipv4Addr,
    ) {
        let (Some(&to_mac), Some(&about_mac)) = (self.macs.get(&to), self.macs.get(&about)) else {
            return;
        };
        let message = ArpMessage::is_at(about_mac, about, to_mac, to);
        let frame = EthernetFrame {
            dst: to_mac,
            src: self.mac,
            payload: EtherPayload::Arp(message),
        };
        let prov = self.prov();
        self.emit(net, sched, frame, prov);
    }

    // -- floods -------------------------------------------------------------

    fn flood_tick(&mut self, net: &mut Net, sched: &mut Scheduler<Action>, now: SimTime) {
        let Some(ActivePhase::Flood(run)) = &mut self.active else {
            return;
        };
        if now >= run.until {
            self.finalize_phase(net, sched, now);
            return;
        }
        let rate;
        match &mut run.kind {
            FloodKind::PshAck {
                target,
                port,
                rate: r,
                spoof,
            } => {
                rate = *r;
                let target = *target;
                let port = *port;
                let spoof = *spoof;
                let len = self.rng.draw_range(16, 65) as usize;
                let mut junk = vec![0u8; len];
                self.rng.fill_bytes(&mut junk);
                let segment = TcpSegment {
                    src_port: self.rng.draw_range(1024, 65536) as u16,
                    dst_port: port,
                    seq: self.rng.next_u64() as u32,
                    ack: self.rng.next_u64() as u32,
                    flags: TcpFlags::PSH | TcpFlags::ACK,
                    window: 64240,
                    checksum: 0,
                    payload: junk,
                };
                self.flood_send(net, sched, target, IpPayload::Tcp(segment), spoof);
            }
            FloodKind::IcmpIgmp {
                target,
                rate: r,
                icmp_fraction,
                spoof,
                seq,
            } => {
                rate = *r;
                let target = *target;
                let fraction = *icmp_fraction;
                let spoof = *spoof;
                *seq = seq.wrapping_add(1);
                let seq_now = *seq;
                if self.rng.chance(fraction) {
                    let message =
                        IcmpMessage::echo_request(FLOOD_PING_ID, seq_now, vec![0xa5; 1400]);
                    self.flood_send(net, sched, target, IpPayload::Icmp(message), spoof);
                } else {
                    let message = IgmpMessage::v2_report(IGMP_REPORT_GROUP);
                    self.flood_send(net, sched, target, IpPayload::Igmp(message), spoof);
                }
            }
        }
        // Even spacing with ±10% jitter.
        let base = 1_000_000_000 / rate.max(1);
        let jitter = 0.9 + 0.2 * self.rng.next_f64();
        let spacing = SimTime::from_nanos((base as f64 * jitter) as u64);
        let next = now + spacing;
        let Some(ActivePhase::Flood(run)) = &self.active else {
            return;
        };
        if next < run.until {
            self.timer(sched, next, tok(TOK_FLOOD, 0));
        } else {
            self.timer(sched, run.until, tok(TOK_PHASE_END, self.phase as u64));
        }
    }

    // -- connection killer ----------------------------------------------------

    /// Feeds one diverted TCP segment to the kill tracker; emits the
    /// RST pair the moment a connection is seen synchronized.
    fn kill_observe(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        packet: &Ipv4Packet,
    ) {
        let IpPayload::Tcp(segment) = &packet.payload else {
            return;
        };
        let from = Endpoint::new(packet.src, segment.src_port);
        let to = Endpoint::new(packet.dst, segment.dst_port);
        let (key, forward) = if (from.ip, from.port) <= (to.ip, to.port) {
            ((from, to), true)
        } else {
            ((to, from), false)
        };
        let is_syn = segment.flags.contains(TcpFlags::SYN);
        let is_rst = segment.flags.contains(TcpFlags::RST);
        let track = self.tracks.entry(key).or_default();
        if is_rst {
            // Already dying; drop the track so a fresh handshake under
            // the same tuple starts clean.
            self.tracks.remove(&key);
            return;
        }
        if track.killed {
            if is_syn && !segment.flags.contains(TcpFlags::ACK) {
                // A retry handshake: track it anew.
                *track = ConnTrack::default();
            } else {
                return;
            }
        }
        let dir = if forward { &mut track.fwd } else { &mut track.bwd };
        dir.next_seq = Some(segment.seq.wrapping_add(segment.seq_len()));
        if !is_syn && segment.flags.contains(TcpFlags::ACK) {
            dir.synced = true;
        }
        let ready = track.fwd.next_seq.is_some()
            && track.bwd.next_seq.is_some()
            && (track.fwd.synced || track.bwd.synced);
        if !ready {
            return;
        }
        track.killed = true;
        let (a, b) = key;
        let seq_from_a = track.fwd.next_seq.unwrap();
        let seq_from_b = track.bwd.next_seq.unwrap();
        self.kills.push(KillRecord { at: now, a, b });
        // RST to b, forged as if a sent it, and vice versa.
        self.forge_rst(net, sched, a, b, seq_from_a);
        self.forge_rst(net, sched, b, a, seq_from_b);
    }

    /// Emits a forged RST from `src` to `dst` carrying `seq` (the next
    /// sequence number `dst` expects from `src`).
    fn forge_rst(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        src: Endpoint,
        dst: Endpoint,
        seq: u32,
    ) {
        let Some(next_mac) = self.next_hop_mac(net, dst.ip) else {
            return;
        };
        let segment = TcpSegment {
            src_port: src.port,
            dst_port: dst.port,
            seq,
            ack: 0,
            flags: TcpFlags::RST,
            window: 0,
            checksum: 0,
            payload: Vec::new(),
        };
        self.emit_ip_to_mac(
            net,
            sched,
            next_mac,
            src.ip,
            dst.ip,
            64,
            IpPayload::Tcp(segment),
        );
    }

    // -- relay ----------------------------------------------------------------

    /// True next-hop MAC for `dst`: the host itself when it shares the
    /// attacker's subnet, the subnet router otherwise.
    fn next_hop_mac(&self, net: &Net, dst: Ipv4Addr) -> Option<MacAddress> {
        let iface = &net.topo.host(self.host).interfaces[0];
        let hop = if iface.subnet.contains(dst) {
            dst
        } else {
            iface.subnet.host(1)
        };
        self.macs.get(&hop).copied()
    }

    fn relay(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        frame: &EthernetFrame,
    ) {
        let EtherPayload::Ipv4(packet) = &frame.payload else {
            return;
        };
        let Some(next_mac) = self.next_hop_mac(net, packet.dst) else {
            return;
        };
        let (src_port, dst_port) = match &packet.payload {
            IpPayload::Tcp(t) => (t.src_port, t.dst_port),
            IpPayload::Udp(u) => (u.src_port, u.dst_port),
            _ => (0, 0),
        };
        self.loot.push(LootRecord {
            at: now,
            src: packet.src,
            dst: packet.dst,
            protocol: packet.payload.protocol(),
            src_port,
            dst_port,
            bytes: packet.total_length() as usize,
        });
        let relayed = EthernetFrame {
            dst: next_mac,
            src: self.mac,
            payload: frame.payload.clone(),
        };
        let prov = Provenance {
            agent: self.agent_id,
            label: self.current_label(),
            relayed: true,
        };
        self.emit(net, sched, relayed, prov);
    }

    // -- brute force -----------------------------------------------------------

    fn bf_start_attempt(&mut self, net: &mut Net, sched: &mut Scheduler<Action>, now: SimTime) {
        let (target, attempt) = {
            let Some(ActivePhase::Bf(run)) = &mut self.active else {
                return;
            };
            if run.attempt >= run.wordlist.pairs.len() {
                self.finalize_phase(net, sched, now);
                return;
            }
            run.buf.clear();
            run.stage = 0;
            run.attempt_started = now;
            (run.target, run.attempt)
        };
        let label = self.current_label();
        let key = net.client_connect(
            sched,
            now,
            self.host,
            target,
            self.agent_index,
            self.agent_id,
            label,
        );
        if let Some(ActivePhase::Bf(run)) = &mut self.active {
            run.conn = Some(key);
        }
        let arg = ((self.phase as u64) << 16) | attempt as u64;
        self.timer(sched, now + BF_ATTEMPT_TIMEOUT, tok(TOK_BF_TIMEOUT, arg));
    }

    fn bf_finish_attempt(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        success: bool,
    ) {
        let Some(ActivePhase::Bf(run)) = &mut self.active else {
            return;
        };
        let (user, pass) = run.wordlist.pairs[run.attempt].clone();
        let service = match run.service {
            ServiceKind::Ftp => "FTP",
            _ => "SSH",
        };
        net.stats.bf_attempts.push(BfAttempt {
            service: service.to_string(),
            target: run.target.ip,
            username: user,
            password: pass,
            started: run.attempt_started,
            finished: now,
            success,
        });
        if let Some(key) = run.conn.take() {
            net.conn_close(sched, now, self.host, key);
        }
        run.attempt += 1;
        let exhausted = run.attempt >= run.wordlist.pairs.len();
        let interval = run.interval;
        let attempt = run.attempt;
        if success || exhausted {
            self.finalize_phase(net, sched, now);
            return;
        }
        // Fixed cadence from phase start; a slow attempt just starts
        // the next one immediately.
        let due = self.phase_started + interval * attempt as u64;
        let arg = ((self.phase as u64) << 16) | attempt as u64;
        self.timer(sched, due.max(now), tok(TOK_BF, arg));
    }

    fn bf_conn_event(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        key: ConnKey,
        event: TcpEvent,
    ) {
        let Some(ActivePhase::Bf(run)) = &mut self.active else {
            return;
        };
        if run.conn != Some(key) {
            return;
        }
        let host = self.host;
        match event {
            TcpEvent::Connected => match run.service {
                ServiceKind::Ftp => {}
                _ => {
                    net.conn_send(
                        sched,
                        now,
                        host,
                        key,
                        b"SSH-2.0-simssh-client_1.0\r\n",
                        true,
                    );
                }
            },
            TcpEvent::Data(bytes) => {
                run.buf.extend_from_slice(&bytes);
                let text = String::from_utf8_lossy(&run.buf).to_string();
                let (user, pass) = run.wordlist.pairs[run.attempt].clone();
                match run.service {
                    ServiceKind::Ftp => {
                        if run.stage == 0 && text.contains("220 ") {
                            run.stage = 1;
                            net.conn_send(
                                sched,
                                now,
                                host,
                                key,
                                format!("USER {user}\r\n").as_bytes(),
                                true,
                            );
                        } else if run.stage == 1 && text.contains("331 ") {
                            run.stage = 2;
                            net.conn_send(
                                sched,
                                now,
                                host,
                                key,
                                format!("PASS {pass}\r\n").as_bytes(),
                                true,
                            );
                        } else if run.stage == 2 && text.contains("230 ") {
                            self.bf_finish_attempt(net, sched, now, true);
                        } else if run.stage == 2 && text.contains("530 ") {
                            self.bf_finish_attempt(net, sched, now, false);
                        }
                    }
                    _ => {
                        if run.stage == 0 && text.contains("SSH-2.0-") && text.contains('\n') {
                            run.stage = 1;
                            net.conn_send(
                                sched,
                                now,
                                host,
                                key,
                                format!("AUTH {user} {pass}\r\n").as_bytes(),
                                true,
                            );
                        } else if text.contains("AUTH-OK") {
                            self.bf_finish_attempt(net, sched, now, true);
                        } else if text.contains("AUTH-FAIL") {
                            self.bf_finish_attempt(net, sched, now, false);
                        }
                    }
                }
            }
            TcpEvent::ConnectFailed | TcpEvent::Reset => {
                run.conn = None;
                self.bf_finish_attempt(net, sched, now, false);
            }
            TcpEvent::PeerClosed | TcpEvent::Closed => {
                // Server hung up without a verdict (or teardown of a
                // decided attempt, which bf_finish already forgot).
                self.bf_finish_attempt(net, sched, now, false);
            }
            TcpEvent::ArmSynTimer(_) | TcpEvent::ArmTimeWait(_) => unreachable!(),
        }
    }

    // -- hub callbacks -----------------------------------------------------------

    pub fn on_timer(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        token: u64,
    ) {
        match tok_kind(token) {
            TOK_PHASE => self.activate_phase(net, sched, now, tok_arg(token) as usize),
            TOK_SCAN => self.scan_tick(net, sched, now),
            TOK_POISON => self.poison_tick(net, sched, now),
            TOK_FLOOD => self.flood_tick(net, sched, now),
            TOK_PHASE_END => {
                if tok_arg(token) as usize == self.phase && self.active.is_some() {
                    self.finalize_phase(net, sched, now);
                }
            }
            TOK_BF => {
                if tok_arg(token) >> 16 == self.phase as u64 {
                    self.bf_start_attempt(net, sched, now);
                }
            }
            TOK_BF_TIMEOUT => {
                let arg = tok_arg(token);
                if let Some(ActivePhase::Bf(run)) = &self.active {
                    if arg >> 16 == self.phase as u64
                        && run.attempt == (arg & 0xffff) as usize
                        && run.conn.is_some()
                    {
                        self.bf_finish_attempt(net, sched, now, false);
                    }
                }
            }
            _ => {}
        }
    }

    pub fn on_notice(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        notice: AgentNotice,
    ) {
        if let AgentNotice::Conn { key, event, .. } = notice {
            self.bf_conn_event(net, sched, now, key, event);
        }
    }

    /// Inspects every frame reaching the attacker's interface before
    /// the host stack. Scan replies pass through (the stack's
    /// RST-for-unknown is the half-open scanner's RST); diverted
    /// traffic is consumed, logged, killed if armed, and relayed.
    pub fn tap(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        frame: &EthernetFrame,
        prov: Provenance,
    ) -> Tap {
        self.scan_observe(frame);
        if !self.relay_on || frame.dst != self.mac {
            return Tap::Pass;
        }
        let EtherPayload::Ipv4(packet) = &frame.payload else {
            return Tap::Pass;
        };
        if self.ips.contains(&packet.dst) {
            return Tap::Pass;
        }
        if prov.relayed {
            self.relay_loop_drops += 1;
            return Tap::Consumed;
        }
        // Relay first so the segment lands before any forged RST
        // emitted at the same instant.
        self.relay(net, sched, now, frame);
        if self.kill_armed {
            let packet = packet.clone();
            self.kill_observe(net, sched, now, &packet);
        }
        Tap::Consumed
    }
}
