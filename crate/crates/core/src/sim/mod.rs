//! The live network: topology plus per-host runtime state (ARP
//! resolution queues, TCP connections, service listeners, ingress
//! budgets), frame transport across switches and the router, SPAN
//! capture, and ground-truth provenance for every emitted frame.
//!
//! The [`Net`] struct owns everything hosts do mechanically; traffic
//! *sources* (benign lanes, the attacker) live outside as an
//! [`AgentHub`] so the same machinery serves scenarios and tests.

mod stats;

pub use stats::{
    BfAttempt, ExchangeOutcome, ExchangeRecord, MitmAudit, NetCounters, PhaseRecord, RunStats,
};

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::net::Ipv4Addr;

use crate::capture::{AgentId, CaptureLog, LabelTag};
use crate::engine::{RngStream, Scheduler, SimTime};
use crate::netmodel::{ArpOrigin, HostId, PortId, Role, ServiceKind, SwitchId, Topology};
use crate::protocols::{
    rst_for_unknown, tcp_step, ArpMessage, Endpoint, EtherPayload, EthernetFrame, IcmpMessage,
    IpPayload, Ipv4Packet, TcpConnection, TcpEvent, TcpInput, TcpSegment, UdpDatagram,
    ICMP_ECHO_REPLY, ICMP_ECHO_REQUEST, ICMP_TIME_EXCEEDED, ICMP_UNREACHABLE, TCP_MSS,
};

/// Ground truth attached to every frame in flight. Never serialized
/// into wire bytes; the capture stage records it alongside the frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Provenance {
    pub agent: AgentId,
    pub label: LabelTag,
    /// Set once a frame has passed through the attacker's relay, both
    /// to guard against relay loops and to let audits verify
    /// interception.
    pub relayed: bool,
}

/// Scheduler event payload for the whole simulation.
#[derive(Debug, Clone)]
pub enum Action {
    /// A frame reaches a switch ingress port.
    SwitchIngress {
        switch: SwitchId,
        port: PortId,
        frame: EthernetFrame,
        prov: Provenance,
    },
    /// A frame reaches a host interface.
    HostIngress {
        host: HostId,
        iface: usize,
        frame: EthernetFrame,
        prov: Provenance,
    },
    HostTimer {
        host: HostId,
        timer: HostTimer,
    },
    /// Periodic or one-shot wakeup for an agent in the hub.
    AgentWake {
        agent: usize,
    },
    /// Agent-armed timer with an opaque token.
    AgentTimer {
        agent: usize,
        token: u64,
    },
}

#[derive(Debug, Clone)]
pub enum HostTimer {
    /// ARP resolution for `ip` has been outstanding for a second.
    ArpRetry { ip: Ipv4Addr },
    /// Same-instant deferral between an ARP binding update and the
    /// flush of packets queued on it, so that every binding update in
    /// the same instant lands before the queue drains.
    ArpFlush { ip: Ipv4Addr },
    TcpSyn { key: ConnKey },
    TcpTimeWait { key: ConnKey },
    /// Embryonic-connection reaper: a server connection still waiting
    /// for its handshake ACK when this fires is silently aborted, so
    /// half-open slots recover after a flood.
    Embryonic { key: ConnKey },
}

/// How long a server waits in `SynReceived` before giving up on the
/// handshake and freeing the slot.
pub const EMBRYONIC_TIMEOUT: SimTime = SimTime::from_secs(9);

/// Connection identity within one host: local endpoint, remote endpoint.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct ConnKey {
    pub local: Endpoint,
    pub remote: Endpoint,
}

/// What the host runtime notifies agents about.
#[derive(Debug, Clone)]
pub enum AgentNotice {
    Conn {
        agent: usize,
        host: HostId,
        key: ConnKey,
        event: TcpEvent,
    },
    PingReply {
        agent: usize,
        seq: u16,
        from: Ipv4Addr,
    },
    UdpReply {
        agent: usize,
        local_port: u16,
        payload: Vec<u8>,
        from: Ipv4Addr,
    },
}

/// Application-facing connection events fed to server sessions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AppEvent {
    Connected,
    Data(Vec<u8>),
    PeerClosed,
    Closed,
    Reset,
    /// Answer to [`AppCmd::OpenPassive`]: the allocated data port.
    PasvPort(u16),
}

/// Commands a server session issues back to its host runtime.
#[derive(Debug, Clone)]
pub enum AppCmd {
    Send { bytes: Vec<u8>, push: bool },
    Close,
    /// Allocate an ephemeral port and register a one-shot passive
    /// data listener owned by this control connection.
    OpenPassive,
    /// Attach the payload a passive listener will serve on accept.
    ArmPassive { port: u16, payload: Vec<u8> },
    /// Send on a sibling connection of the same host (FTP data
    /// sessions report completion on their control connection).
    SendOther { key: ConnKey, bytes: Vec<u8>, push: bool },
}

/// One server-side application session bound to a connection.
pub trait ServerApp {
    fn step(&mut self, event: AppEvent) -> Vec<AppCmd>;
}

/// Why a listener exists on a port.
#[derive(Debug, Clone)]
pub enum ListenerKind {
    Service(ServiceKind),
    /// FTP passive-mode data port: serves `payload` once, then the
    /// listener is gone. `ctrl` is the owning control connection.
    FtpData { ctrl: ConnKey, payload: Vec<u8> },
}

/// Everything a session factory may need to build a server session.
pub struct SessionSpawn<'a> {
    pub kind: &'a ListenerKind,
    pub host: HostId,
    pub host_name: &'a str,
    pub local: Endpoint,
    pub remote: Endpoint,
    /// The server's one valid credential pair, when configured.
    pub credentials: Option<&'a (String, String)>,
}

type SessionFactory = Box<dyn Fn(SessionSpawn<'_>) -> Box<dyn ServerApp>>;
type UdpService = Box<dyn Fn(ServiceKind, &[u8], SimTime) -> Option<Vec<u8>>>;

/// Traffic sources: benign lanes and the attacker. The hub is held
/// outside [`Net`] so its handlers can freely mutate the network.
pub trait AgentHub {
    fn on_wake(&mut self, net: &mut Net, sched: &mut Scheduler<Action>, now: SimTime, agent: usize);
    fn on_timer(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        agent: usize,
        token: u64,
    );
    fn on_notice(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        notice: AgentNotice,
    );
    /// First look at frames arriving on tapped hosts (the attacker's
    /// promiscuous view). Return `Tap::Consumed` to suppress normal
    /// stack processing.
    fn tap_ingress(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        iface: usize,
        frame: &EthernetFrame,
        prov: Provenance,
    ) -> Tap;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Tap {
    Pass,
    Consumed,
}

/// Ingress-processing and backlog limits; the DoS scenario's denial
/// mechanics rest on these defaults.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CapacityConfig {
    /// Sustained per-host ingress processing rate, packets/second.
    pub ingress_pps: u64,
    /// Ingress burst allowance, packets.
    pub ingress_burst: u64,
    /// Per-service cap on embryonic (SYN_RECEIVED) connections.
    pub half_open_limit: usize,
    /// Per-service cap on live connections; excess SYNs are dropped.
    pub established_limit: usize,
}

impl Default for CapacityConfig {
    fn default() -> CapacityConfig {
        CapacityConfig {
            ingress_pps: 200,
            ingress_burst: 100,
            half_open_limit: 64,
            established_limit: 64,
        }
    }
}

/// Token bucket over integer nanosecond credit: one packet costs
/// `1e9 / ingress_pps` ns of credit, capped at a burst's worth.
#[derive(Debug, Clone)]
struct TokenBucket {
    credit_ns: u64,
    last: SimTime,
    cost_ns: u64,
    cap_ns: u64,
}

impl TokenBucket {
    fn new(pps: u64, burst: u64) -> TokenBucket {
        let cost_ns = 1_000_000_000 / pps.max(1);
        TokenBucket {
            credit_ns: cost_ns * burst,
            last: SimTime::ZERO,
            cost_ns,
            cap_ns: cost_ns * burst,
        }
    }

    fn admit(&mut self, now: SimTime) -> bool {
        let elapsed = now.saturating_sub(self.last).as_nanos();
        self.last = now;
        self.credit_ns = (self.credit_ns + elapsed).min(self.cap_ns);
        if self.credit_ns >= self.cost_ns {
            self.credit_ns -= self.cost_ns;
            true
        } else {
            false
        }
    }
}

struct PendingArp {
    queue: Vec<(usize, Ipv4Packet, Provenance)>,
    retried: bool,
}

struct ListenerEntry {
    kind: ListenerKind,
    one_shot: bool,
}

enum ConnOwner {
    /// Driven by a hub agent (benign client lane or attacker).
    Client { agent: usize },
    /// Driven by a server-side application session.
    Server { session: Box<dyn ServerApp> },
}

struct ConnEntry {
    conn: TcpConnection,
    owner: ConnOwner,
    iface: usize,
    agent_id: AgentId,
    label: LabelTag,
}

/// Per-host mutable runtime state, parallel to `Topology::hosts`.
struct HostRuntime {
    bucket: TokenBucket,
    conns: BTreeMap<ConnKey, ConnEntry>,
    listeners: BTreeMap<u16, ListenerEntry>,
    pending_arp: BTreeMap<Ipv4Addr, PendingArp>,
    /// Ping waits keyed by (icmp id, seq) → hub agent.
    ping_waits: BTreeMap<(u16, u16), usize>,
    /// UDP client waits keyed by local port → hub agent.
    udp_waits: BTreeMap<u16, usize>,
    isn_stream: RngStream,
    next_ephemeral: u16,
    next_ident: u16,
}

impl HostRuntime {
    fn new(seed: u64, name: &str, capacity: &CapacityConfig) -> HostRuntime {
        HostRuntime {
            bucket: TokenBucket::new(capacity.ingress_pps, capacity.ingress_burst),
            conns: BTreeMap::new(),
            listeners: BTreeMap::new(),
            pending_arp: BTreeMap::new(),
            ping_waits: BTreeMap::new(),
            udp_waits: BTreeMap::new(),
            isn_stream: RngStream::new(seed, &format!("isn:{name}")),
            next_ephemeral: 49152,
            next_ident: 1,
        }
    }

    fn alloc_ephemeral(&mut self) -> u16 {
        for _ in 0..16384 {
            let port = self.next_ephemeral;
            self.next_ephemeral = if self.next_ephemeral == u16::MAX {
                49152
            } else {
                self.next_ephemeral + 1
            };
            let in_use = self.listeners.contains_key(&port)
                || self.conns.keys().any(|k| k.local.port == port);
            if !in_use {
                return port;
            }
        }
        unreachable!("ephemeral port space exhausted");
    }

    fn alloc_ident(&mut self) -> u16 {
        let id = self.next_ident;
        self.next_ident = self.next_ident.wrapping_add(1);
        id
    }
}

/// The simulated network and everything on it except traffic sources.
pub struct Net {
    pub topo: Topology,
    pub capture: CaptureLog,
    pub stats: RunStats,
    /// Agent-id → display name registry; host stacks occupy the first
    /// `topo.hosts.len()` slots.
    pub agent_names: Vec<String>,
    pub seed: u64,
    capacity: CapacityConfig,
    rt: Vec<HostRuntime>,
    capture_switch: Option<SwitchId>,
    /// Hosts whose ingress is first offered to the hub's tap.
    pub tap_hosts: BTreeSet<HostId>,
    /// Label applied to frames the attacker's own stack emits
    /// reactively; the attacker agent keeps it at the current phase.
    pub attacker_label: Option<LabelTag>,
    attacker_host: Option<HostId>,
    pending_notices: VecDeque<AgentNotice>,
    session_factory: SessionFactory,
    udp_service: UdpService,
    /// Per-host valid credential pair for SSH/FTP services.
    pub credentials: BTreeMap<HostId, (String, String)>,
}

impl Net {
    pub fn new(topo: Topology, seed: u64, capacity: CapacityConfig) -> Net {
        let agent_names: Vec<String> = topo.hosts.iter().map(|h| h.name.clone()).collect();
        let rt = topo
            .hosts
            .iter()
            .map(|h| HostRuntime::new(seed, &h.name, &capacity))
            .collect();
        let attacker_host = topo.hosts_with_role(Role::Attacker).next();
        Net {
            topo,
            capture: CaptureLog::new(),
            stats: RunStats::default(),
            agent_names,
            seed,
            capacity,
            rt,
            capture_switch: None,
            tap_hosts: BTreeSet::new(),
            attacker_label: None,
            attacker_host,
            pending_notices: VecDeque::new(),
            session_factory: Box::new(|_| panic!("no session factory installed")),
            udp_service: Box::new(|_, _, _| None),
            credentials: BTreeMap::new(),
        }
    }

    pub fn set_session_factory(&mut self, f: SessionFactory) {
        self.session_factory = f;
    }

    pub fn set_udp_service(&mut self, f: UdpService) {
        self.udp_service = f;
    }

    /// Registers a traffic agent for provenance purposes.
    pub fn register_agent(&mut self, name: &str) -> AgentId {
        self.agent_names.push(name.to_string());
        AgentId((self.agent_names.len() - 1) as u32)
    }

    /// Provenance of a host's own stack (ARP replies, RSTs, echo
    /// replies, ICMP errors). The attacker's stack inherits the
    /// current attack-phase label.
    pub fn stack_prov(&self, host: HostId) -> Provenance {
        let label = if Some(host) == self.attacker_host {
            self.attacker_label.unwrap_or(LabelTag::Benign)
        } else {
            LabelTag::Benign
        };
        Provenance {
            agent: AgentId(host.0 as u32),
            label,
            relayed: false,
        }
    }

    pub fn attacker_host(&self) -> Option<HostId> {
        self.attacker_host
    }

    /// Attaches SPAN capture to the given switch.
    pub fn attach_capture(&mut self, switch: SwitchId) -> Result<(), crate::netmodel::NetError> {
        if self.topo.switch(switch).span_port().is_none() {
            return Err(crate::netmodel::NetError::ConfigConflict(format!(
                "switch {} has no SPAN port",
                self.topo.switch(switch).name
            )));
        }
        self.capture_switch = Some(switch);
        Ok(())
    }

    /// Opens a permanent service listener (done at setup from the
    /// topology's service table).
    pub fn open_service_listeners(&mut self) {
        for (i, host) in self.topo.hosts.iter().enumerate() {
            for (port, kind) in &host.services {
                if kind.is_tcp() {
                    self.rt[i].listeners.insert(
                        *port,
                        ListenerEntry {
                            kind: ListenerKind::Service(*kind),
                            one_shot: false,
                        },
                    );
                }
            }
        }
    }

    pub fn drain_notice(&mut self) -> Option<AgentNotice> {
        self.pending_notices.pop_front()
    }

    // -----------------------------------------------------------------
    // Frame transport

    /// Puts a frame on the wire from a host interface; it reaches the
    /// attached switch one link latency later.
    pub fn emit_frame(
        &mut self,
        sched: &mut Scheduler<Action>,
        host: HostId,
        iface: usize,
        frame: EthernetFrame,
        prov: Provenance,
    ) {
        let ifc = &self.topo.host(host).interfaces[iface];
        self.stats.counters.frames_emitted += 1;
        sched
            .schedule_in(
                self.topo.link_latency,
                Action::SwitchIngress {
                    switch: ifc.switch,
                    port: ifc.port,
                    frame,
                    prov,
                },
            )
            .expect("schedule frame emission");
    }

    /// Switch forwarding: learn, deliver/flood, mirror to SPAN. The
    /// SPAN leg feeds the capture sink directly rather than a host
    /// stack.
    pub fn switch_ingress(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        switch: SwitchId,
        port: PortId,
        frame: EthernetFrame,
        prov: Provenance,
    ) {
        let latency = self.topo.link_latency;
        let result = self
            .topo
            .switch_mut(switch)
            .forward(port, frame.src, frame.dst);
        for egress in &result.egress {
            let owner = self.topo.switch(switch).owner(*egress);
            let host = self.topo.host(owner);
            let Some(iface) = host
                .interfaces
                .iter()
                .position(|i| i.switch == switch && i.port == *egress)
            else {
                continue; // capture-only leg (the monitor's SPAN port)
            };
            self.stats.counters.switch_deliveries += 1;
            sched
                .schedule_in(
                    latency,
                    Action::HostIngress {
                        host: owner,
                        iface,
                        frame: frame.clone(),
                        prov,
                    },
                )
                .expect("schedule switch delivery");
        }
        if result.span.is_some() && Some(switch) == self.capture_switch {
            self.capture.append(
                now + latency,
                crate::protocols::encode_frame(&frame),
                prov.agent,
                prov.label,
            );
        }
    }

    // -----------------------------------------------------------------
    // Host ingress pipeline

    pub fn host_ingress(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        iface: usize,
        frame: EthernetFrame,
        prov: Provenance,
    ) {
        let role = self.topo.host(host).role;
        // Routers forward at line rate and the attacker's tooling reads
        // straight off the wire; everyone else pays the processing
        // budget that floods exhaust.
        let exempt = matches!(role, Role::Router | Role::Attacker);
        if !exempt && !self.rt[host.0].bucket.admit(now) {
            self.stats.counters.bucket_drops += 1;
            return;
        }
        let ifc_mac = self.topo.host(host).interfaces[iface].mac;
        if frame.dst != ifc_mac && !frame.dst.is_broadcast() {
            self.stats.counters.l2_ignored += 1;
            return;
        }
        match frame.payload {
            EtherPayload::Arp(message) => self.arp_ingress(sched, now, host, iface, message),
            EtherPayload::Ipv4(packet) => self.ip_ingress(sched, now, host, iface, packet, prov),
            EtherPayload::Other { .. } => self.stats.counters.l2_ignored += 1,
        }
    }

    fn arp_ingress(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        iface: usize,
        message: ArpMessage,
    ) {
        let had_queue = self.rt[host.0]
            .pending_arp
            .get(&message.sender_ip)
            .is_some_and(|p| !p.queue.is_empty());
        let reply = self
            .topo
            .host_mut(host)
            .process_arp(iface, &message, now);
        if let Some(reply) = reply {
            let prov = self.stack_prov(host);
            let frame = EthernetFrame {
                dst: message.sender_mac,
                src: self.topo.host(host).interfaces[iface].mac,
                payload: EtherPayload::Arp(reply),
            };
            self.emit_frame(sched, host, iface, frame, prov);
        }
        if had_queue {
            // Deferred flush: any further binding updates arriving in
            // this same instant (e.g. a poisoner racing the genuine
            // reply) take effect before the queued packets go out.
            sched
                .schedule(
                    now,
                    Action::HostTimer {
                        host,
                        timer: HostTimer::ArpFlush {
                            ip: message.sender_ip,
                        },
                    },
                )
                .expect("schedule arp flush");
        }
    }

    fn ip_ingress(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        iface: usize,
        packet: Ipv4Packet,
        prov: Provenance,
    ) {
        if self.topo.host(host).owns_ip(packet.dst) {
            self.local_deliver(sched, now, host, iface, packet, prov);
        } else if self.topo.host(host).role == Role::Router {
            self.route_packet(sched, now, host, iface, packet, prov);
        } else {
            // Not ours and we are no router: a stale or poisoned MAC
            // binding delivered someone else's packet here.
            self.stats.counters.misdelivered += 1;
        }
    }

    fn local_deliver(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        iface: usize,
        packet: Ipv4Packet,
        prov: Provenance,
    ) {
        self.audit_arrival(now, host, &packet, prov);
        match packet.payload {
            IpPayload::Icmp(ref icmp) if icmp.icmp_type == ICMP_ECHO_REQUEST => {
                self.stats.counters.echo_requests += 1;
                let reply = IcmpMessage::echo_reply(icmp.id, icmp.seq, icmp.payload.clone());
                let stack = self.stack_prov(host);
                self.send_ip(sched, host, iface, packet.src, IpPayload::Icmp(reply), stack);
            }
            IpPayload::Icmp(icmp) if icmp.icmp_type == ICMP_ECHO_REPLY => {
                if let Some(agent) = self.rt[host.0].ping_waits.remove(&(icmp.id, icmp.seq)) {
                    self.pending_notices.push_back(AgentNotice::PingReply {
                        agent,
                        seq: icmp.seq,
                        from: packet.src,
                    });
                } else {
                    self.stats.counters.unmatched_replies += 1;
                }
            }
            IpPayload::Icmp(_) => self.stats.counters.icmp_errors_received += 1,
            IpPayload::Igmp(_) => self.stats.counters.igmp_received += 1,
            IpPayload::Udp(datagram) => self.udp_ingress(sched, now, host, iface, packet.src, datagram),
            IpPayload::Tcp(segment) => {
                self.tcp_ingress(sched, now, host, iface, packet.src, packet.dst, segment)
            }
            IpPayload::Other { .. } => self.stats.counters.l2_ignored += 1,
        }
    }

    fn udp_ingress(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        iface: usize,
        src: Ipv4Addr,
        datagram: UdpDatagram,
    ) {
        let service = self.topo.host(host).service_on(datagram.dst_port);
        if let Some(kind) = service.filter(|k| !k.is_tcp()) {
            if let Some(response) = (self.udp_service)(kind, &datagram.payload, now) {
                let reply = UdpDatagram {
                    src_port: datagram.dst_port,
                    dst_port: datagram.src_port,
                    checksum: 0,
                    payload: response,
                };
                let stack = self.stack_prov(host);
                self.send_ip(sched, host, iface, src, IpPayload::Udp(reply), stack);
            }
            return;
        }
        if let Some(agent) = self.rt[host.0].udp_waits.remove(&datagram.dst_port) {
            self.pending_notices.push_back(AgentNotice::UdpReply {
                agent,
                local_port: datagram.dst_port,
                payload: datagram.payload,
                from: src,
            });
        } else {
            self.stats.counters.udp_unhandled += 1;
        }
    }

    // -----------------------------------------------------------------
    // Router

    fn route_packet(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        router: HostId,
        iface_in: usize,
        mut packet: Ipv4Packet,
        prov: Provenance,
    ) {
        self.stats.counters.routed_in += 1;
        self.audit_router_ingress(now, &packet, prov);
        if packet.ttl <= 1 {
            self.stats.counters.ttl_drops += 1;
            self.icmp_error(sched, router, iface_in, ICMP_TIME_EXCEEDED, 0, &packet);
            return;
        }
        let Some(egress) = self
            .topo
            .host(router)
            .interfaces
            .iter()
            .position(|i| i.subnet.contains(packet.dst))
        else {
            self.stats.counters.no_route += 1;
            self.icmp_error(sched, router, iface_in, ICMP_UNREACHABLE, 0, &packet);
            return;
        };
        packet.ttl -= 1;
        packet.refresh_header_checksum();
        self.stats.counters.routed_out += 1;
        let dst = packet.dst;
        self.resolve_and_emit(sched, router, egress, dst, packet, prov);
    }

    fn icmp_error(
        &mut self,
        sched: &mut Scheduler<Action>,
        router: HostId,
        iface_in: usize,
        icmp_type: u8,
        code: u8,
        offending: &Ipv4Packet,
    ) {
        // ICMP errors are never sent about ICMP errors.
        if let IpPayload::Icmp(icmp) = &offending.payload {
            if icmp.icmp_type != ICMP_ECHO_REQUEST && icmp.icmp_type != ICMP_ECHO_REPLY {
                return;
            }
        }
        let message = IcmpMessage::error(icmp_type, code, offending);
        let stack = self.stack_prov(router);
        self.send_ip(
            sched,
            router,
            iface_in,
            offending.src,
            IpPayload::Icmp(message),
            stack,
        );
    }

    // -----------------------------------------------------------------
    // IP emission and ARP resolution

    /// Builds and sends an IP packet from `host` out of `iface`,
    /// resolving the next-hop MAC (destination if on-link, else the
    /// subnet's router) through the host's ARP table.
    pub fn send_ip(
        &mut self,
        sched: &mut Scheduler<Action>,
        host: HostId,
        iface: usize,
        dst: Ipv4Addr,
        payload: IpPayload,
        prov: Provenance,
    ) {
        let (src, ttl) = {
            let h = self.topo.host(host);
            (h.interfaces[iface].ip, h.default_ttl())
        };
        let ident = self.rt[host.0].alloc_ident();
        let packet = Ipv4Packet::new(src, dst, ttl, ident, payload);
        self.resolve_and_emit(sched, host, iface, dst, packet, prov);
    }

    /// Picks the emitting interface for `dst` (the one facing it, or
    /// the first interface as default route for single-homed hosts).
    pub fn send_ip_routed(
        &mut self,
        sched: &mut Scheduler<Action>,
        host: HostId,
        dst: Ipv4Addr,
        payload: IpPayload,
        prov: Provenance,
    ) {
        let iface = self
            .topo
            .host(host)
            .interfaces
            .iter()
            .position(|i| i.subnet.contains(dst))
            .unwrap_or(0);
        self.send_ip(sched, host, iface, dst, payload, prov);
    }

    fn resolve_and_emit(
        &mut self,
        sched: &mut Scheduler<Action>,
        host: HostId,
        iface: usize,
        dst: Ipv4Addr,
        packet: Ipv4Packet,
        prov: Provenance,
    ) {
        let ifc = &self.topo.host(host).interfaces[iface];
        let next_hop = if ifc.subnet.contains(dst) {
            dst
        } else {
            ifc.subnet.host(1) // the router's address in every LAN
        };
        match self.topo.host(host).arp_table.lookup(next_hop) {
            Some(mac) => {
                let src_mac = self.topo.host(host).interfaces[iface].mac;
                let frame = EthernetFrame {
                    dst: mac,
                    src: src_mac,
                    payload: EtherPayload::Ipv4(packet),
                };
                self.emit_frame(sched, host, iface, frame, prov);
            }
            None => self.queue_on_arp(sched, host, iface, next_hop, packet, prov),
        }
    }

    fn queue_on_arp(
        &mut self,
        sched: &mut Scheduler<Action>,
        host: HostId,
        iface: usize,
        next_hop: Ipv4Addr,
        packet: Ipv4Packet,
        prov: Provenance,
    ) {
        let fresh = {
            let pending = self.rt[host.0]
                .pending_arp
                .entry(next_hop)
                .or_insert_with(|| PendingArp {
                    queue: Vec::new(),
                    retried: false,
                });
            pending.queue.push((iface, packet, prov));
            pending.queue.len() == 1 && !pending.retried
        };
        if fresh {
            self.broadcast_who_has(sched, host, iface, next_hop);
            sched
                .schedule_in(
                    SimTime::from_secs(1),
                    Action::HostTimer {
                        host,
                        timer: HostTimer::ArpRetry { ip: next_hop },
                    },
                )
                .expect("schedule arp retry");
        }
    }

    fn broadcast_who_has(
        &mut self,
        sched: &mut Scheduler<Action>,
        host: HostId,
        iface: usize,
        target: Ipv4Addr,
    ) {
        let ifc = &self.topo.host(host).interfaces[iface];
        let message = ArpMessage::who_has(ifc.mac, ifc.ip, target);
        let frame = EthernetFrame {
            dst: crate::netmodel::MacAddress::BROADCAST,
            src: ifc.mac,
            payload: EtherPayload::Arp(message),
        };
        let prov = self.stack_prov(host);
        self.stats.counters.arp_requests += 1;
        self.emit_frame(sched, host, iface, frame, prov);
    }

    // -----------------------------------------------------------------
    // Timers

    pub fn host_timer(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        timer: HostTimer,
    ) {
        match timer {
            HostTimer::ArpRetry { ip } => {
                let outstanding = self.rt[host.0]
                    .pending_arp
                    .get(&ip)
                    .is_some_and(|p| !p.queue.is_empty());
                if !outstanding {
                    self.rt[host.0].pending_arp.remove(&ip);
                    return;
                }
                let retried = {
                    let pending = self.rt[host.0].pending_arp.get_mut(&ip).unwrap();
                    std::mem::replace(&mut pending.retried, true)
                };
                if retried {
                    // Second timeout: give up and drop the queue.
                    let pending = self.rt[host.0].pending_arp.remove(&ip).unwrap();
                    self.stats.counters.arp_failures += pending.queue.len() as u64;
                } else {
                    let iface = self.rt[host.0].pending_arp[&ip].queue[0].0;
                    self.broadcast_who_has(sched, host, iface, ip);
                    sched
                        .schedule_in(
                            SimTime::from_secs(1),
                            Action::HostTimer {
                                host,
                                timer: HostTimer::ArpRetry { ip },
                            },
                        )
                        .expect("schedule arp retry");
                }
            }
            HostTimer::ArpFlush { ip } => {
                if self.topo.host(host).arp_table.lookup(ip).is_none() {
                    return; // binding vanished — keep waiting for the retry path
                }
                if let Some(pending) = self.rt[host.0].pending_arp.remove(&ip) {
                    for (iface, packet, prov) in pending.queue {
                        let dst = packet.dst;
                        self.resolve_and_emit(sched, host, iface, dst, packet, prov);
                    }
                }
            }
            HostTimer::TcpSyn { key } => self.tcp_timer(sched, now, host, key, TcpInput::SynTimeout),
            HostTimer::TcpTimeWait { key } => {
                self.tcp_timer(sched, now, host, key, TcpInput::TimeWaitExpired)
            }
            HostTimer::Embryonic { key } => {
                let stalled = self.rt[host.0]
                    .conns
                    .get(&key)
                    .is_some_and(|e| e.conn.state == crate::protocols::TcpState::SynReceived);
                if stalled {
                    self.rt[host.0].conns.remove(&key);
                    self.stats.counters.embryonic_reaped += 1;
                }
            }
        }
    }

    // -----------------------------------------------------------------
    // TCP plumbing

    fn tcp_ingress(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        iface: usize,
        src: Ipv4Addr,
        dst: Ipv4Addr,
        segment: TcpSegment,
    ) {
        let key = ConnKey {
            local: Endpoint::new(dst, segment.dst_port),
            remote: Endpoint::new(src, segment.src_port),
        };
        if self.rt[host.0].conns.contains_key(&key) {
            self.tcp_drive(sched, now, host, key, TcpInput::Segment(segment));
            return;
        }
        use crate::protocols::TcpFlags;
        let is_syn = segment.flags.contains(TcpFlags::SYN) && !segment.flags.contains(TcpFlags::ACK);
        if is_syn {
            if let Some(listener) = self.rt[host.0].listeners.get(&segment.dst_port) {
                if !self.admit_syn(host, segment.dst_port) {
                    self.stats.counters.backlog_drops += 1;
                    return;
                }
                let one_shot = listener.one_shot;
                let spawn_kind = listener.kind.clone();
                let session = (self.session_factory)(SessionSpawn {
                    kind: &spawn_kind,
                    host,
                    host_name: &self.topo.host(host).name,
                    local: key.local,
                    remote: key.remote,
                    credentials: self.credentials.get(&host),
                });
                if one_shot {
                    self.rt[host.0].listeners.remove(&segment.dst_port);
                }
                let isn = self.rt[host.0].isn_stream.next_u64() as u32;
                let conn = TcpConnection::listener(key.local, key.remote, isn);
                let stack = self.stack_prov(host);
                self.rt[host.0].conns.insert(
                    key,
                    ConnEntry {
                        conn,
                        owner: ConnOwner::Server { session },
                        iface,
                        agent_id: stack.agent,
                        label: stack.label,
                    },
                );
                sched
                    .schedule_in(
                        EMBRYONIC_TIMEOUT,
                        Action::HostTimer {
                            host,
                            timer: HostTimer::Embryonic { key },
                        },
                    )
                    .expect("schedule embryonic reaper");
                self.tcp_drive(sched, now, host, key, TcpInput::Segment(segment));
                return;
            }
        }
        // No connection and no listener: answer per RFC 793 §3.4.
        self.stats.counters.rst_for_unknown += 1;
        if let Some(rst) = rst_for_unknown(&segment) {
            let stack = self.stack_prov(host);
            self.send_ip(sched, host, iface, src, IpPayload::Tcp(rst), stack);
        }
    }

    fn admit_syn(&self, host: HostId, port: u16) -> bool {
        use crate::protocols::TcpState;
        let mut half_open = 0usize;
        let mut established = 0usize;
        for (k, e) in &self.rt[host.0].conns {
            if k.local.port != port {
                continue;
            }
            match e.conn.state {
                TcpState::SynReceived => half_open += 1,
                TcpState::Established
                | TcpState::FinWait1
                | TcpState::FinWait2
                | TcpState::CloseWait
                | TcpState::LastAck => established += 1,
                _ => {}
            }
        }
        half_open < self.capacity.half_open_limit && established < self.capacity.established_limit
    }

    fn tcp_timer(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        key: ConnKey,
        input: TcpInput,
    ) {
        if self.rt[host.0].conns.contains_key(&key) {
            self.tcp_drive(sched, now, host, key, input);
        }
    }

    /// Runs one TCP step and applies its outputs: segments go on the
    /// wire, timer events are armed, and owner notifications go to the
    /// server session (driving it immediately) or the agent hub.
    fn tcp_drive(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        key: ConnKey,
        input: TcpInput,
    ) {
        let entry = self.rt[host.0].conns.get_mut(&key).expect("known connection");
        let out = match tcp_step(&mut entry.conn, input) {
            Ok(out) => out,
            Err(_) => return, // command raced a teardown; the owner learns via events
        };
        let iface = entry.iface;
        let prov = Provenance {
            agent: entry.agent_id,
            label: entry.label,
            relayed: false,
        };
        for segment in out.segments {
            self.send_ip(sched, host, iface, key.remote.ip, IpPayload::Tcp(segment), prov);
        }
        let mut closed = false;
        for event in out.events {
            match event {
                TcpEvent::ArmSynTimer(delay) => {
                    sched
                        .schedule_in(
                            delay,
                            Action::HostTimer {
                                host,
                                timer: HostTimer::TcpSyn { key },
                            },
                        )
                        .expect("schedule syn timer");
                }
                TcpEvent::ArmTimeWait(delay) => {
                    sched
                        .schedule_in(
                            delay,
                            Action::HostTimer {
                                host,
                                timer: HostTimer::TcpTimeWait { key },
                            },
                        )
                        .expect("schedule time-wait timer");
                }
                event => {
                    closed |= matches!(
                        event,
                        TcpEvent::Closed | TcpEvent::Reset | TcpEvent::ConnectFailed
                    );
                    self.owner_event(sched, now, host, key, event);
                }
            }
        }
        if closed {
            self.rt[host.0].conns.remove(&key);
        }
    }

    /// Routes one TCP event to the connection's owner.
    fn owner_event(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        key: ConnKey,
        event: TcpEvent,
    ) {
        let cmds = {
            let entry = self.rt[host.0].conns.get_mut(&key).expect("known connection");
            match &mut entry.owner {
                ConnOwner::Client { agent } => {
                    let agent = *agent;
                    self.pending_notices.push_back(AgentNotice::Conn {
                        agent,
                        host,
                        key,
                        event,
                    });
                    return;
                }
                ConnOwner::Server { session } => {
                    let app_event = match event {
                        TcpEvent::Connected => AppEvent::Connected,
                        TcpEvent::Data(data) => AppEvent::Data(data),
                        TcpEvent::PeerClosed => AppEvent::PeerClosed,
                        TcpEvent::Closed => AppEvent::Closed,
                        TcpEvent::Reset | TcpEvent::ConnectFailed => AppEvent::Reset,
                        TcpEvent::ArmSynTimer(_) | TcpEvent::ArmTimeWait(_) => unreachable!(),
                    };
                    session.step(app_event)
                }
            }
        };
        self.apply_app_cmds(sched, now, host, key, cmds);
    }

    fn apply_app_cmds(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        key: ConnKey,
        cmds: Vec<AppCmd>,
    ) {
        for cmd in cmds {
            match cmd {
                AppCmd::Send { bytes, push } => self.conn_send(sched, now, host, key, &bytes, push),
                AppCmd::Close => self.conn_close(sched, now, host, key),
                AppCmd::OpenPassive => {
                    let port = self.rt[host.0].alloc_ephemeral();
                    self.rt[host.0].listeners.insert(
                        port,
                        ListenerEntry {
                            kind: ListenerKind::FtpData {
                                ctrl: key,
                                payload: Vec::new(),
                            },
                            one_shot: true,
                        },
                    );
                    // Tell the session which port it got; its reply
                    // (the 227 line) comes back as more commands.
                    let follow_up = {
                        let entry = self.rt[host.0].conns.get_mut(&key).expect("ctrl conn");
                        match &mut entry.owner {
                            ConnOwner::Server { session } => session.step(AppEvent::PasvPort(port)),
                            ConnOwner::Client { .. } => Vec::new(),
                        }
                    };
                    self.apply_app_cmds(sched, now, host, key, follow_up);
                }
                AppCmd::ArmPassive { port, payload } => {
                    if let Some(listener) = self.rt[host.0].listeners.get_mut(&port) {
                        if let ListenerKind::FtpData { payload: slot, .. } = &mut listener.kind {
                            *slot = payload;
                        }
                    }
                }
                AppCmd::SendOther { key: other, bytes, push } => {
                    if self.rt[host.0].conns.contains_key(&other) {
                        self.conn_send(sched, now, host, other, &bytes, push);
                    }
                }
            }
        }
    }

    /// Sends application bytes on a connection, segmenting at the MSS.
    pub fn conn_send(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        key: ConnKey,
        bytes: &[u8],
        push: bool,
    ) {
        if bytes.is_empty() {
            return;
        }
        let chunks: Vec<&[u8]> = bytes.chunks(TCP_MSS).collect();
        let last = chunks.len() - 1;
        for (i, chunk) in chunks.into_iter().enumerate() {
            if !self.rt[host.0].conns.contains_key(&key) {
                return; // torn down mid-write
            }
            self.tcp_drive(
                sched,
                now,
                host,
                key,
                TcpInput::Send {
                    data: chunk.to_vec(),
                    push: push && i == last,
                },
            );
        }
    }

    pub fn conn_close(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        key: ConnKey,
    ) {
        if self.rt[host.0].conns.contains_key(&key) {
            self.tcp_drive(sched, now, host, key, TcpInput::Close);
        }
    }

    /// Opens a client connection owned by hub agent `agent`; the SYN
    /// goes out immediately. Returns the connection key for follow-ups.
    pub fn client_connect(
        &mut self,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        host: HostId,
        remote: Endpoint,
        agent: usize,
        agent_id: AgentId,
        label: LabelTag,
    ) -> ConnKey {
        let iface = self
            .topo
            .host(host)
            .interfaces
            .iter()
            .position(|i| i.subnet.contains(remote.ip))
            .unwrap_or(0);
        let local_ip = self.topo.host(host).interfaces[iface].ip;
        let port = self.rt[host.0].alloc_ephemeral();
        let isn = self.rt[host.0].isn_stream.next_u64() as u32;
        let key = ConnKey {
            local: Endpoint::new(local_ip, port),
            remote,
        };
        let conn = TcpConnection::client(key.local, key.remote, isn);
        self.rt[host.0].conns.insert(
            key,
            ConnEntry {
                conn,
                owner: ConnOwner::Client { agent },
                iface,
                agent_id,
                label,
            },
        );
        self.tcp_drive(sched, now, host, key, TcpInput::Open);
        key
    }

    /// Sends one ICMP echo request and registers the agent for the
    /// reply notice. `id` disambiguates agents pinging the same host.
    pub fn send_ping(
        &mut self,
        sched: &mut Scheduler<Action>,
        host: HostId,
        dst: Ipv4Addr,
        agent: usize,
        id: u16,
        seq: u16,
        prov: Provenance,
    ) {
        let payload = vec![0x5a; 56];
        let message = IcmpMessage::echo_request(id, seq, payload);
        self.rt[host.0].ping_waits.insert((id, seq), agent);
        self.send_ip_routed(sched, host, dst, IpPayload::Icmp(message), prov);
    }

    pub fn cancel_ping(&mut self, host: HostId, id: u16, seq: u16) -> bool {
        self.rt[host.0].ping_waits.remove(&(id, seq)).is_some()
    }

    /// Sends a UDP datagram from a fresh ephemeral port and registers
    /// the agent for the reply notice. Returns the local port.
    pub fn send_udp(
        &mut self,
        sched: &mut Scheduler<Action>,
        host: HostId,
        dst: Ipv4Addr,
        dst_port: u16,
        payload: Vec<u8>,
        agent: usize,
        prov: Provenance,
    ) -> u16 {
        let port = self.rt[host.0].alloc_ephemeral();
        self.rt[host.0].udp_waits.insert(port, agent);
        let datagram = UdpDatagram {
            src_port: port,
            dst_port,
            checksum: 0,
            payload,
        };
        self.send_ip_routed(sched, host, dst, IpPayload::Udp(datagram), prov);
        port
    }

    pub fn cancel_udp_wait(&mut self, host: HostId, local_port: u16) -> bool {
        self.rt[host.0].udp_waits.remove(&local_port).is_some()
    }

    /// Direct table write used by the attacker's own bookkeeping and
    /// by tests constructing specific cache states.
    pub fn bind_arp(
        &mut self,
        host: HostId,
        ip: Ipv4Addr,
        mac: crate::netmodel::MacAddress,
        now: SimTime,
        origin: ArpOrigin,
    ) {
        self.topo.host_mut(host).arp_table.bind(ip, mac, now, origin);
    }

    /// Snapshot of a connection's state, for tests and the attacker's
    /// connection tracking.
    pub fn conn_state(&self, host: HostId, key: &ConnKey) -> Option<crate::protocols::TcpState> {
        self.rt[host.0].conns.get(key).map(|e| e.conn.state)
    }

    pub fn conn_count(&self, host: HostId) -> usize {
        self.rt[host.0].conns.len()
    }

    pub fn conn_states(&self, host: HostId) -> Vec<(ConnKey, crate::protocols::TcpState)> {
        self.rt[host.0]
            .conns
            .iter()
            .map(|(k, e)| (*k, e.conn.state))
            .collect()
    }

    // -----------------------------------------------------------------
    // MitM interception audit

    /// Arms the audit that criterion-level checks read: from
    /// `window_start` on, every IP packet between a victim and the
    /// router must carry the relay mark.
    pub fn arm_mitm_audit(&mut self, victims: BTreeSet<Ipv4Addr>, window_start: SimTime) {
        self.stats.mitm_audit = Some(MitmAudit {
            window_start,
            victims,
            pair_packets: 0,
            relayed_packets: 0,
        });
    }

    fn audit_router_ingress(&mut self, now: SimTime, packet: &Ipv4Packet, prov: Provenance) {
        if let Some(audit) = &mut self.stats.mitm_audit {
            if now >= audit.window_start && audit.victims.contains(&packet.src) {
                audit.pair_packets += 1;
                if prov.relayed {
                    audit.relayed_packets += 1;
                }
            }
        }
    }

    fn audit_arrival(&mut self, now: SimTime, host: HostId, packet: &Ipv4Packet, prov: Provenance) {
        if let Some(audit) = &mut self.stats.mitm_audit {
            if now >= audit.window_start
                && self.topo.host(host).interfaces.iter().any(|i| audit.victims.contains(&i.ip))
                && !self
                    .topo
                    .host(host)
                    .interfaces
                    .iter()
                    .any(|i| i.subnet.contains(packet.src))
            {
                // Routed traffic arriving at a poisoned victim.
                audit.pair_packets += 1;
                if prov.relayed {
                    audit.relayed_packets += 1;
                }
            }
        }
    }
}

/// The full simulation: network plus traffic sources, pluggable into
/// the engine as its event handler.
pub struct World<H: AgentHub> {
    pub net: Net,
    pub hub: H,
}

impl<H: AgentHub> World<H> {
    pub fn new(net: Net, hub: H) -> World<H> {
        World { net, hub }
    }

    fn drain_notices(&mut self, sched: &mut Scheduler<Action>, now: SimTime) {
        while let Some(notice) = self.net.drain_notice() {
            self.hub.on_notice(&mut self.net, sched, now, notice);
        }
    }
}

impl<H: AgentHub> crate::engine::Handler<Action> for World<H> {
    fn handle(&mut self, sched: &mut Scheduler<Action>, now: SimTime, action: Action) {
        match action {
            Action::SwitchIngress {
                switch,
                port,
                frame,
                prov,
            } => {
                self.net.switch_ingress(sched, now, switch, port, frame, prov);
            }
            Action::HostIngress {
                host,
                iface,
                frame,
                prov,
            } => {
                let tapped = self.net.tap_hosts.contains(&host);
                let verdict = if tapped {
                    self.hub
                        .tap_ingress(&mut self.net, sched, now, host, iface, &frame, prov)
                } else {
                    Tap::Pass
                };
                if verdict == Tap::Pass {
                    self.net.host_ingress(sched, now, host, iface, frame, prov);
                }
                self.drain_notices(sched, now);
            }
            Action::HostTimer { host, timer } => {
                self.net.host_timer(sched, now, host, timer);
                self.drain_notices(sched, now);
            }
            Action::AgentWake { agent } => {
                self.hub.on_wake(&mut self.net, sched, now, agent);
                self.drain_notices(sched, now);
            }
            Action::AgentTimer { agent, token } => {
                self.hub.on_timer(&mut self.net, sched, now, agent, token);
                self.drain_notices(sched, now);
            }
        }
    }
}

#[cfg(test)]
mod tests;
