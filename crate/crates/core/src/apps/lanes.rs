//! Benign client lanes: agents that wake at exponentially distributed
//! intervals and run one complete application exchange per wakeup over
//! a fresh connection, logging success or failure.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use crate::capture::{AgentId, LabelTag};
use crate::engine::{RngStream, Scheduler, SimTime};
use crate::netmodel::HostId;
use crate::protocols::{Endpoint, EthernetFrame, TcpEvent};
use crate::sim::{
    Action, AgentHub, AgentNotice, ConnKey, ExchangeOutcome, ExchangeRecord, Net, Provenance, Tap,
};

use super::servers::{http_catalog, ftp_files, SSH_CLIENT_BANNER};

/// How long a TCP exchange may run before the lane declares failure.
pub const EXCHANGE_TIMEOUT: SimTime = SimTime::from_secs(15);
/// How long ping and NTP lanes wait for their reply.
pub const REPLY_TIMEOUT: SimTime = SimTime::from_secs(5);

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LaneKind {
    Http,
    Ftp,
    Ssh,
    Ntp,
    Ping,
}

impl LaneKind {
    pub fn default_mean_interval(self) -> SimTime {
        match self {
            LaneKind::Http => SimTime::from_secs(10),
            LaneKind::Ftp => SimTime::from_secs(600),
            LaneKind::Ssh => SimTime::from_secs(300),
            LaneKind::Ntp => SimTime::from_secs(64),
            LaneKind::Ping => SimTime::from_secs(30),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LaneConfig {
    /// Display name, e.g. "http:user-03"; keys the exchange log.
    pub name: String,
    pub kind: LaneKind,
    /// Source host running the client.
    pub host: HostId,
    pub target: Ipv4Addr,
    pub port: u16,
    pub mean_interval: SimTime,
    pub start: SimTime,
    pub stop: SimTime,
    /// Credential pair SSH and FTP clients present (the valid one).
    pub credentials: Option<(String, String)>,
}

// ---------------------------------------------------------------------------
// Exchange state machines

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FtpStage {
    Banner,
    UserOk,
    PassOk,
    Syst,
    Pwd,
    Pasv,
    Transfer,
    Quit,
}

#[derive(Debug, Clone)]
enum FtpOp {
    List,
    Retr(String),
}

struct FtpX {
    ctrl: ConnKey,
    data: Option<ConnKey>,
    buf: Vec<u8>,
    op: FtpOp,
    stage: FtpStage,
    got_226: bool,
    data_done: bool,
    received: usize,
}

enum XState {
    Http {
        key: ConnKey,
        path: String,
        buf: Vec<u8>,
    },
    Ssh {
        key: ConnKey,
        buf: Vec<u8>,
        sent_auth: bool,
        authed: bool,
    },
    Ftp(FtpX),
    Ping {
        seq: u16,
    },
    Ntp {
        local_port: u16,
    },
}

struct Exchange {
    started: SimTime,
    state: XState,
}

/// One benign traffic lane: a Poisson arrival process over one
/// (client host, service) pair, with per-exchange state machines.
pub struct BenignLane {
    pub config: LaneConfig,
    agent_index: usize,
    agent_id: AgentId,
    rng: RngStream,
    next_serial: u64,
    next_ping_seq: u16,
    open: BTreeMap<u64, Exchange>,
    conn_index: BTreeMap<ConnKey, u64>,
    ping_index: BTreeMap<u16, u64>,
    udp_index: BTreeMap<u16, u64>,
}

impl BenignLane {
    /// Registers the lane's provenance identity and seeds its RNG
    /// stream. `agent_index` is the hub slot notices arrive under.
    pub fn new(config: LaneConfig, net: &mut Net, agent_index: usize) -> BenignLane {
        let agent_id = net.register_agent(&config.name);
        let rng = RngStream::new(net.seed, &format!("lane:{}", config.name));
        BenignLane {
            config,
            agent_index,
            agent_id,
            rng,
            next_serial: 0,
            next_ping_seq: 0,
            open: BTreeMap::new(),
            conn_index: BTreeMap::new(),
            ping_index: BTreeMap::new(),
            udp_index: BTreeMap::new(),
        }
    }

    pub fn agent_id(&self) -> AgentId {
        self.agent_id
    }

    fn prov(&self) -> Provenance {
        Provenance {
            agent: self.agent_id,
            label: LabelTag::Benign,
            relayed: false,
        }
    }

    /// Schedules the first wakeup of the Poisson process.
    pub fn schedule_first(&mut self, sched: &mut Scheduler<Action>) {
        let at = self.config.start + self.rng.exp_interval(self.config.mean_interval);
        if at < self.config.stop {
            sched
                .schedule(
                    at,
                    Action::AgentWake {
                        agent: self.agent_index,
                    },
                )
                .expect("schedule first lane wake");
        }
    }

    pub fn on_wake(&mut self, net: &mut Net, sched: &mut Scheduler<Action>, now: SimTime) {
        if now >= self.config.stop {
            return;
        }
        let next = now + self.rng.exp_interval(self.config.mean_interval);
        if next < self.config.stop {
            sched
                .schedule(
                    next,
                    Action::AgentWake {
                        agent: self.agent_index,
                    },
                )
                .expect("schedule lane wake");
        }
        self.launch(net, sched, now);
    }

    fn launch(&mut self, net: &mut Net, sched: &mut Scheduler<Action>, now: SimTime) {
        let serial = self.next_serial;
        self.next_serial += 1;
        let timeout = match self.config.kind {
            LaneKind::Ping | LaneKind::Ntp => REPLY_TIMEOUT,
            _ => EXCHANGE_TIMEOUT,
        };
        sched
            .schedule_in(
                timeout,
                Action::AgentTimer {
                    agent: self.agent_index,
                    token: serial,
                },
            )
            .expect("schedule exchange timeout");
        let state = match self.config.kind {
            LaneKind::Http => {
                let catalog = http_catalog();
                let path = catalog[self.rng.draw_range(0, catalog.len() as u64) as usize].clone();
                let key = self.connect(net, sched, now);
                self.conn_index.insert(key, serial);
                XState::Http {
                    key,
                    path,
                    buf: Vec::new(),
                }
            }
            LaneKind::Ssh => {
                let key = self.connect(net, sched, now);
                self.conn_index.insert(key, serial);
                XState::Ssh {
                    key,
                    buf: Vec::new(),
                    sent_auth: false,
                    authed: false,
                }
            }
            LaneKind::Ftp => {
                let files = ftp_files();
                let op = if self.rng.chance(0.5) {
                    FtpOp::List
                } else {
                    let pick = self.rng.draw_range(0, files.len() as u64) as usize;
                    FtpOp::Retr(files[pick].0.to_string())
                };
                let key = self.connect(net, sched, now);
                self.conn_index.insert(key, serial);
                XState::Ftp(FtpX {
                    ctrl: key,
                    data: None,
                    buf: Vec::new(),
                    op,
                    stage: FtpStage::Banner,
                    got_226: false,
                    data_done: false,
                    received: 0,
                })
            }
            LaneKind::Ping => {
                let seq = self.next_ping_seq;
                self.next_ping_seq = self.next_ping_seq.wrapping_add(1);
                let prov = self.prov();
                net.send_ping(
                    sched,
                    self.config.host,
                    self.config.target,
                    self.agent_index,
                    self.agent_index as u16,
                    seq,
                    prov,
                );
                self.ping_index.insert(seq, serial);
                XState::Ping { seq }
            }
            LaneKind::Ntp => {
                let prov = self.prov();
                let request = super::servers::ntp_request(now);
                let local_port = net.send_udp(
                    sched,
                    self.config.host,
                    self.config.target,
                    self.config.port,
                    request,
                    self.agent_index,
                    prov,
                );
                self.udp_index.insert(local_port, serial);
                XState::Ntp { local_port }
            }
        };
        self.open.insert(
            serial,
            Exchange {
                started: now,
                state,
            },
        );
    }

    fn connect(&mut self, net: &mut Net, sched: &mut Scheduler<Action>, now: SimTime) -> ConnKey {
        net.client_connect(
            sched,
            now,
            self.config.host,
            Endpoint::new(self.config.target, self.config.port),
            self.agent_index,
            self.agent_id,
            LabelTag::Benign,
        )
    }

    fn finish(&mut self, net: &mut Net, now: SimTime, serial: u64, outcome: ExchangeOutcome) {
        let Some(exchange) = self.open.remove(&serial) else {
            return;
        };
        match &exchange.state {
            XState::Http { key, .. } | XState::Ssh { key, .. } => {
                self.conn_index.remove(key);
            }
            XState::Ftp(ftp) => {
                self.conn_index.remove(&ftp.ctrl);
                if let Some(data) = &ftp.data {
                    self.conn_index.remove(data);
                }
            }
            XState::Ping { seq } => {
                self.ping_index.remove(seq);
                net.cancel_ping(self.config.host, self.agent_index as u16, *seq);
            }
            XState::Ntp { local_port } => {
                self.udp_index.remove(local_port);
                net.cancel_udp_wait(self.config.host, *local_port);
            }
        }
        net.stats.exchanges.push(ExchangeRecord {
            lane: self.config.name.clone(),
            started: exchange.started,
            finished: now,
            outcome,
        });
    }

    /// Exchange timeout: anything still open under this serial failed.
    pub fn on_timer(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        serial: u64,
    ) {
        let Some(exchange) = self.open.get(&serial) else {
            return;
        };
        // Shut down whatever is still live, then record the failure.
        let mut to_close = Vec::new();
        match &exchange.state {
            XState::Http { key, .. } | XState::Ssh { key, .. } => to_close.push(*key),
            XState::Ftp(ftp) => {
                to_close.push(ftp.ctrl);
                if let Some(data) = ftp.data {
                    to_close.push(data);
                }
            }
            XState::Ping { .. } | XState::Ntp { .. } => {}
        }
        for key in to_close {
            net.conn_close(sched, now, self.config.host, key);
        }
        self.finish(net, now, serial, ExchangeOutcome::Failure);
    }

    pub fn on_conn_event(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        key: ConnKey,
        event: TcpEvent,
    ) {
        let Some(&serial) = self.conn_index.get(&key) else {
            return; // teardown of an exchange already recorded
        };
        let Some(exchange) = self.open.get_mut(&serial) else {
            return;
        };
        let host = self.config.host;
        match &mut exchange.state {
            XState::Http { key: ck, path, buf } => match event {
                TcpEvent::Connected => {
                    let request = format!(
                        "GET {path} HTTP/1.1\r\nHost: {}\r\nUser-Agent: simbrowse/1.0\r\nConnection: close\r\n\r\n",
                        self.config.target
                    );
                    net.conn_send(sched, now, host, *ck, request.as_bytes(), true);
                }
                TcpEvent::Data(bytes) => {
                    buf.extend_from_slice(&bytes);
                    if http_response_complete(buf) {
                        let key = *ck;
                        net.conn_close(sched, now, host, key);
                        self.finish(net, now, serial, ExchangeOutcome::Success);
                    }
                }
                TcpEvent::ConnectFailed | TcpEvent::Reset => {
                    self.finish(net, now, serial, ExchangeOutcome::Failure);
                }
                TcpEvent::PeerClosed | TcpEvent::Closed => {
                    // Server hung up before the response completed.
                    let key = *ck;
                    net.conn_close(sched, now, host, key);
                    self.finish(net, now, serial, ExchangeOutcome::Failure);
                }
                TcpEvent::ArmSynTimer(_) | TcpEvent::ArmTimeWait(_) => unreachable!(),
            },
            XState::Ssh {
                key: ck,
                buf,
                sent_auth,
                authed,
            } => match event {
                TcpEvent::Connected => {
                    net.conn_send(
                        sched,
                        now,
                        host,
                        *ck,
                        format!("{SSH_CLIENT_BANNER}\r\n").as_bytes(),
                        true,
                    );
                }
                TcpEvent::Data(bytes) => {
                    buf.extend_from_slice(&bytes);
                    let text = String::from_utf8_lossy(buf).to_string();
                    if !*sent_auth && text.contains("SSH-2.0-") && text.contains('\n') {
                        *sent_auth = true;
                        let (user, token) = self
                            .config
                            .credentials
                            .clone()
                            .unwrap_or_else(|| ("operator".into(), "badtoken".into()));
                        net.conn_send(
                            sched,
                            now,
                            host,
                            *ck,
                            format!("AUTH {user} {token}\r\n").as_bytes(),
                            true,
                        );
                    } else if text.contains("AUTH-OK") {
                        *authed = true;
                        let key = *ck;
                        net.conn_close(sched, now, host, key);
                        self.finish(net, now, serial, ExchangeOutcome::Success);
                    } else if text.contains("AUTH-FAIL") {
                        let key = *ck;
                        net.conn_close(sched, now, host, key);
                        self.finish(net, now, serial, ExchangeOutcome::Failure);
                    }
                }
                TcpEvent::ConnectFailed | TcpEvent::Reset => {
                    self.finish(net, now, serial, ExchangeOutcome::Failure);
                }
                TcpEvent::PeerClosed | TcpEvent::Closed => {
                    let authed = *authed;
                    let key = *ck;
                    net.conn_close(sched, now, host, key);
                    let outcome = if authed {
                        ExchangeOutcome::Success
                    } else {
                        ExchangeOutcome::Failure
                    };
                    self.finish(net, now, serial, outcome);
                }
                TcpEvent::ArmSynTimer(_) | TcpEvent::ArmTimeWait(_) => unreachable!(),
            },
            XState::Ftp(ftp) => {
                let is_data_conn = ftp.data == Some(key);
                match event {
                    TcpEvent::Connected if !is_data_conn => {
                        // Control connected; the 220 banner drives us on.
                    }
                    TcpEvent::Connected => {}
                    TcpEvent::Data(bytes) if is_data_conn => {
                        ftp.received += bytes.len();
                    }
                    TcpEvent::PeerClosed if is_data_conn => {
                        ftp.data_done = true;
                        let data_key = key;
                        net.conn_close(sched, now, host, data_key);
                        self.conn_index.remove(&data_key);
                        let Some(exchange) = self.open.get_mut(&serial) else {
                            return;
                        };
                        if let XState::Ftp(ftp) = &mut exchange.state {
                            ftp.data = None;
                            if ftp.got_226 {
                                self.ftp_quit(net, sched, now, serial);
                            }
                        }
                    }
                    TcpEvent::Data(bytes) => {
                        ftp.buf.extend_from_slice(&bytes);
                        self.ftp_drive_ctrl(net, sched, now, serial);
                    }
                    TcpEvent::ConnectFailed | TcpEvent::Reset => {
                        self.fail_ftp(net, sched, now, serial);
                    }
                    TcpEvent::PeerClosed | TcpEvent::Closed => {
                        if ftp.stage == FtpStage::Quit {
                            self.finish(net, now, serial, ExchangeOutcome::Success);
                        } else {
                            self.fail_ftp(net, sched, now, serial);
                        }
                    }
                    TcpEvent::ArmSynTimer(_) | TcpEvent::ArmTimeWait(_) => unreachable!(),
                }
            }
            XState::Ping { .. } | XState::Ntp { .. } => {}
        }
    }

    /// Consumes complete reply lines from the FTP control buffer and
    /// advances the session stage machine.
    fn ftp_drive_ctrl(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        serial: u64,
    ) {
        loop {
            let Some(exchange) = self.open.get_mut(&serial) else {
                return;
            };
            let XState::Ftp(ftp) = &mut exchange.state else {
                return;
            };
            let Some(pos) = ftp.buf.iter().position(|&b| b == b'\n') else {
                return;
            };
            let line: Vec<u8> = ftp.buf.drain(..=pos).collect();
            let line = String::from_utf8_lossy(&line).trim_end().to_string();
            let code = line.get(..3).unwrap_or("");
            let ctrl = ftp.ctrl;
            let host = self.config.host;
            let send = |net: &mut Net, sched: &mut Scheduler<Action>, text: String| {
                net.conn_send(sched, now, host, ctrl, format!("{text}\r\n").as_bytes(), true);
            };
            match (ftp.stage, code) {
                (FtpStage::Banner, "220") => {
                    ftp.stage = FtpStage::UserOk;
                    let user = self.credential_user();
                    send(net, sched, format!("USER {user}"));
                }
                (FtpStage::UserOk, "331") => {
                    ftp.stage = FtpStage::PassOk;
                    let pass = self.credential_pass();
                    send(net, sched, format!("PASS {pass}"));
                }
                (FtpStage::PassOk, "230") => {
                    ftp.stage = FtpStage::Syst;
                    send(net, sched, "SYST".to_string());
                }
                (FtpStage::PassOk, "530") => {
                    self.fail_ftp(net, sched, now, serial);
                    return;
                }
                (FtpStage::Syst, "215") => {
                    ftp.stage = FtpStage::Pwd;
                    send(net, sched, "PWD".to_string());
                }
                (FtpStage::Pwd, "257") => {
                    ftp.stage = FtpStage::Pasv;
                    send(net, sched, "PASV".to_string());
                }
                (FtpStage::Pasv, "227") => {
                    let Some(port) = parse_pasv_port(&line) else {
                        self.fail_ftp(net, sched, now, serial);
                        return;
                    };
                    ftp.stage = FtpStage::Transfer;
                    let command = match &ftp.op {
                        FtpOp::List => "LIST".to_string(),
                        FtpOp::Retr(name) => format!("RETR {name}"),
                    };
                    send(net, sched, command);
                    // Command first, then the data connection, so the
                    // server has armed the listener payload by accept.
                    let data_key = net.client_connect(
                        sched,
                        now,
                        host,
                        Endpoint::new(self.config.target, port),
                        self.agent_index,
                        self.agent_id,
                        LabelTag::Benign,
                    );
                    let Some(exchange) = self.open.get_mut(&serial) else {
                        return;
                    };
                    if let XState::Ftp(ftp) = &mut exchange.state {
                        ftp.data = Some(data_key);
                    }
                    self.conn_index.insert(data_key, serial);
                }
                (FtpStage::Transfer, "150") => {}
                (FtpStage::Transfer, "226") => {
                    ftp.got_226 = true;
                    if ftp.data_done {
                        self.ftp_quit(net, sched, now, serial);
                        return;
                    }
                }
                (FtpStage::Quit, "221") => {
                    let ctrl = ftp.ctrl;
                    net.conn_close(sched, now, host, ctrl);
                    self.finish(net, now, serial, ExchangeOutcome::Success);
                    return;
                }
                _ => {
                    self.fail_ftp(net, sched, now, serial);
                    return;
                }
            }
        }
    }

    fn ftp_quit(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        serial: u64,
    ) {
        let Some(exchange) = self.open.get_mut(&serial) else {
            return;
        };
        let XState::Ftp(ftp) = &mut exchange.state else {
            return;
        };
        ftp.stage = FtpStage::Quit;
        let ctrl = ftp.ctrl;
        net.conn_send(
            sched,
            now,
            self.config.host,
            ctrl,
            b"QUIT\r\n",
            true,
        );
    }

    fn fail_ftp(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        serial: u64,
    ) {
        let mut to_close = Vec::new();
        if let Some(exchange) = self.open.get(&serial) {
            if let XState::Ftp(ftp) = &exchange.state {
                to_close.push(ftp.ctrl);
                if let Some(data) = ftp.data {
                    to_close.push(data);
                }
            }
        }
        for key in to_close {
            net.conn_close(sched, now, self.config.host, key);
        }
        self.finish(net, now, serial, ExchangeOutcome::Failure);
    }

    fn credential_user(&self) -> String {
        self.config
            .credentials
            .as_ref()
            .map(|(u, _)| u.clone())
            .unwrap_or_else(|| "operator".to_string())
    }

    fn credential_pass(&self) -> String {
        self.config
            .credentials
            .as_ref()
            .map(|(_, p)| p.clone())
            .unwrap_or_else(|| "badtoken".to_string())
    }

    pub fn on_ping_reply(&mut self, net: &mut Net, now: SimTime, seq: u16) {
        if let Some(&serial) = self.ping_index.get(&seq) {
            self.finish(net, now, serial, ExchangeOutcome::Success);
        }
    }

    pub fn on_udp_reply(&mut self, net: &mut Net, now: SimTime, local_port: u16, payload: &[u8]) {
        if let Some(&serial) = self.udp_index.get(&local_port) {
            let outcome = if payload.len() == 48 && payload[0] & 0x07 == 4 {
                ExchangeOutcome::Success
            } else {
                ExchangeOutcome::Failure
            };
            self.finish(net, now, serial, outcome);
        }
    }
}

/// "HTTP/1.1 … Content-Length: N …\r\n\r\n" + N body bytes received?
fn http_response_complete(buf: &[u8]) -> bool {
    let Some(head_end) = buf.windows(4).position(|w| w == b"\r\n\r\n") else {
        return false;
    };
    let head = String::from_utf8_lossy(&buf[..head_end]);
    let content_length = head.lines().find_map(|line| {
        let (name, value) = line.split_once(':')?;
        if name.eq_ignore_ascii_case("content-length") {
            value.trim().parse::<usize>().ok()
        } else {
            None
        }
    });
    match content_length {
        Some(n) => buf.len() >= head_end + 4 + n,
        None => false,
    }
}

/// "227 Entering Passive Mode (h1,h2,h3,h4,p1,p2)" → port.
fn parse_pasv_port(line: &str) -> Option<u16> {
    let inner = line.split_once('(')?.1.split_once(')')?.0;
    let parts: Vec<&str> = inner.split(',').collect();
    if parts.len() != 6 {
        return None;
    }
    let p1: u16 = parts[4].trim().parse().ok()?;
    let p2: u16 = parts[5].trim().parse().ok()?;
    Some((p1 << 8) | p2)
}

// ---------------------------------------------------------------------------
// A hub of benign lanes only (baseline runs and tests)

/// [`AgentHub`] over a set of benign lanes, agent index = lane index.
pub struct LaneHub {
    pub lanes: Vec<BenignLane>,
}

impl LaneHub {
    /// Builds lanes from configs, registering each with the network,
    /// and schedules their first wakeups.
    pub fn new(configs: Vec<LaneConfig>, net: &mut Net, sched: &mut Scheduler<Action>) -> LaneHub {
        let mut lanes = Vec::new();
        for (index, config) in configs.into_iter().enumerate() {
            let mut lane = BenignLane::new(config, net, index);
            lane.schedule_first(sched);
            lanes.push(lane);
        }
        LaneHub { lanes }
    }
}

impl AgentHub for LaneHub {
    fn on_wake(&mut self, net: &mut Net, sched: &mut Scheduler<Action>, now: SimTime, agent: usize) {
        if let Some(lane) = self.lanes.get_mut(agent) {
            lane.on_wake(net, sched, now);
        }
    }

    fn on_timer(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        agent: usize,
        token: u64,
    ) {
        if let Some(lane) = self.lanes.get_mut(agent) {
            lane.on_timer(net, sched, now, token);
        }
    }

    fn on_notice(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        notice: AgentNotice,
    ) {
        match notice {
            AgentNotice::Conn {
                agent, key, event, ..
            } => {
                if let Some(lane) = self.lanes.get_mut(agent) {
                    lane.on_conn_event(net, sched, now, key, event);
                }
            }
            AgentNotice::PingReply { agent, seq, .. } => {
                if let Some(lane) = self.lanes.get_mut(agent) {
                    lane.on_ping_reply(net, now, seq);
                }
            }
            AgentNotice::UdpReply {
                agent,
                local_port,
                payload,
                ..
            } => {
                if let Some(lane) = self.lanes.get_mut(agent) {
                    lane.on_udp_reply(net, now, local_port, &payload);
                }
            }
        }
    }

    fn tap_ingress(
        &mut self,
        _: &mut Net,
        _: &mut Scheduler<Action>,
        _: SimTime,
        _: HostId,
        _: usize,
        _: &EthernetFrame,
        _: Provenance,
    ) -> Tap {
        Tap::Pass
    }
}
