//! Per-connection TCP state machine.
//!
//! Deliberately small: fixed window, no options, no congestion
//! control, and no data retransmission (links are lossless). SYNs are
//! the one retransmitted segment, on a 1 s / 2 s / 4 s backoff, so
//! connection attempts against an unresponsive peer fail after 7 s.
//! Timers are driven by the owner: the machine emits `Arm*` events and
//! the owner feeds back `SynTimeout` / `TimeWaitExpired` inputs.

use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::wire::{TcpFlags, TcpSegment};
use crate::engine::SimTime;

/// Advertised receive window on every emitted segment.
pub const TCP_WINDOW: u16 = 65535;
/// Largest payload an application may hand to `Send`.
pub const TCP_MSS: usize = 1460;
/// Dwell time in TIME_WAIT before the connection record is reclaimed.
pub const TIME_WAIT_DURATION: SimTime = SimTime::from_secs(30);

const SYN_RETRIES: u8 = 2;

/// One side of a TCP connection.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize,
)]
pub struct Endpoint {
    pub ip: Ipv4Addr,
    pub port: u16,
}

impl Endpoint {
    pub fn new(ip: Ipv4Addr, port: u16) -> Endpoint {
        Endpoint { ip, port }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TcpState {
    Closed,
    Listen,
    SynSent,
    SynReceived,
    Established,
    FinWait1,
    FinWait2,
    CloseWait,
    LastAck,
    TimeWait,
}

/// Input to one step: a local command, a received segment, or an
/// expired timer.
#[derive(Debug, Clone)]
pub enum TcpInput {
    /// Active open; valid only in `Closed`.
    Open,
    /// Queue application data; valid in `Established` and `CloseWait`.
    Send { data: Vec<u8>, push: bool },
    /// Orderly close. No-op if already closing.
    Close,
    Segment(TcpSegment),
    SynTimeout,
    TimeWaitExpired,
}

/// Notifications for the connection's owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TcpEvent {
    Connected,
    /// Active open gave up (RST answer or SYN retries exhausted).
    ConnectFailed,
    Data(Vec<u8>),
    /// Peer's FIN arrived; our side may still send.
    PeerClosed,
    /// Connection fully closed and reclaimable.
    Closed,
    /// An in-window RST tore the connection down.
    Reset,
    /// Owner must schedule a `SynTimeout` input after this delay.
    ArmSynTimer(SimTime),
    /// Owner must schedule a `TimeWaitExpired` input after this delay.
    ArmTimeWait(SimTime),
}

/// Segments to transmit and events to surface, in order.
#[derive(Debug, Default)]
pub struct StepOutput {
    pub segments: Vec<TcpSegment>,
    pub events: Vec<TcpEvent>,
}

#[derive(Debug, Error)]
pub enum TcpError {
    #[error("{command} command invalid in state {state:?}")]
    InvalidCommand {
        command: &'static str,
        state: TcpState,
    },
    #[error("send of {len} bytes exceeds the {TCP_MSS}-byte segment limit")]
    OversizedSend { len: usize },
}

#[derive(Debug, Clone)]
pub struct TcpConnection {
    pub state: TcpState,
    pub local: Endpoint,
    pub remote: Endpoint,
    iss: u32,
    snd_nxt: u32,
    rcv_nxt: u32,
    syn_retries_left: u8,
}

impl TcpConnection {
    /// A connection ready for an active open. `isn` is the initial
    /// send sequence number (drawn by the caller for determinism).
    pub fn client(local: Endpoint, remote: Endpoint, isn: u32) -> TcpConnection {
        TcpConnection {
            state: TcpState::Closed,
            local,
            remote,
            iss: isn,
            snd_nxt: isn,
            rcv_nxt: 0,
            syn_retries_left: SYN_RETRIES,
        }
    }

    /// A passive-open connection awaiting the peer's SYN.
    pub fn listener(local: Endpoint, remote: Endpoint, isn: u32) -> TcpConnection {
        TcpConnection {
            state: TcpState::Listen,
            ..TcpConnection::client(local, remote, isn)
        }
    }

    fn seg(&self, flags: TcpFlags, seq: u32, payload: Vec<u8>) -> TcpSegment {
        TcpSegment {
            src_port: self.local.port,
            dst_port: self.remote.port,
            seq,
            ack: if flags.contains(TcpFlags::ACK) {
                self.rcv_nxt
            } else {
                0
            },
            flags,
            window: TCP_WINDOW,
            checksum: 0,
            payload,
        }
    }

    fn seq_in_window(&self, seq: u32) -> bool {
        seq.wrapping_sub(self.rcv_nxt) < u32::from(TCP_WINDOW)
    }

    fn enter_time_wait(&mut self, out: &mut StepOutput) {
        self.state = TcpState::TimeWait;
        out.events.push(TcpEvent::ArmTimeWait(TIME_WAIT_DURATION));
    }
}

/// Advances the state machine by one input.
///
/// Segments never error: unacceptable ones are ignored or re-ACKed,
/// so any input sequence leaves the connection in a defined state.
/// Commands error when the state cannot honor them.
pub fn tcp_step(conn: &mut TcpConnection, input: TcpInput) -> Result<StepOutput, TcpError> {
    let mut out = StepOutput::default();
    match input {
        TcpInput::Open => {
            if conn.state != TcpState::Closed {
                return Err(TcpError::InvalidCommand {
                    command: "open",
                    state: conn.state,
                });
            }
            conn.snd_nxt = conn.iss.wrapping_add(1);
            conn.syn_retries_left = SYN_RETRIES;
            out.segments.push(conn.seg(TcpFlags::SYN, conn.iss, Vec::new()));
            out.events.push(TcpEvent::ArmSynTimer(SimTime::from_secs(1)));
            conn.state = TcpState::SynSent;
        }
        TcpInput::Send { data, push } => {
            if !matches!(conn.state, TcpState::Established | TcpState::CloseWait) {
                return Err(TcpError::InvalidCommand {
                    command: "send",
                    state: conn.state,
                });
            }
            if data.len() > TCP_MSS {
                return Err(TcpError::OversizedSend { len: data.len() });
            }
            let flags = if push {
                TcpFlags::PSH | TcpFlags::ACK
            } else {
                TcpFlags::ACK
            };
            let seq = conn.snd_nxt;
            conn.snd_nxt = conn.snd_nxt.wrapping_add(data.len() as u32);
            out.segments.push(conn.seg(flags, seq, data));
        }
        TcpInput::Close => match conn.state {
            TcpState::Established => {
                out.segments
                    .push(conn.seg(TcpFlags::FIN | TcpFlags::ACK, conn.snd_nxt, Vec::new()));
                conn.snd_nxt = conn.snd_nxt.wrapping_add(1);
                conn.state = TcpState::FinWait1;
            }
            TcpState::CloseWait => {
                out.segments
                    .push(conn.seg(TcpFlags::FIN | TcpFlags::ACK, conn.snd_nxt, Vec::new()));
                conn.snd_nxt = conn.snd_nxt.wrapping_add(1);
                conn.state = TcpState::LastAck;
            }
            TcpState::Listen | TcpState::SynSent => {
                conn.state = TcpState::Closed;
                out.events.push(TcpEvent::Closed);
            }
            // Already closing or closed: nothing left to initiate.
            _ => {}
        },
        TcpInput::Segment(seg) => on_segment(conn, seg, &mut out),
        TcpInput::SynTimeout => {
            if conn.state == TcpState::SynSent {
                if conn.syn_retries_left == 0 {
                    conn.state = TcpState::Closed;
                    out.events.push(TcpEvent::ConnectFailed);
                } else {
                    let delay = match conn.syn_retries_left {
                        2 => SimTime::from_secs(2),
                        _ => SimTime::from_secs(4),
                    };
                    conn.syn_retries_left -= 1;
                    out.segments.push(conn.seg(TcpFlags::SYN, conn.iss, Vec::new()));
                    out.events.push(TcpEvent::ArmSynTimer(delay));
                }
            }
        }
        TcpInput::TimeWaitExpired => {
            if conn.state == TcpState::TimeWait {
                conn.state = TcpState::Closed;
                out.events.push(TcpEvent::Closed);
            }
        }
    }
    Ok(out)
}

fn on_segment(conn: &mut TcpConnection, seg: TcpSegment, out: &mut StepOutput) {
    if seg.flags.contains(TcpFlags::RST) {
        on_rst(conn, &seg, out);
        return;
    }
    match conn.state {
        TcpState::Closed => {}
        TcpState::Listen => {
            if seg.flags.contains(TcpFlags::SYN) && !seg.flags.contains(TcpFlags::ACK) {
                conn.rcv_nxt = seg.seq.wrapping_add(1);
                conn.snd_nxt = conn.iss.wrapping_add(1);
                out.segments
                    .push(conn.seg(TcpFlags::SYN | TcpFlags::ACK, conn.iss, Vec::new()));
                conn.state = TcpState::SynReceived;
            }
        }
        TcpState::SynSent => {
            if seg.flags.contains(TcpFlags::SYN) && seg.flags.contains(TcpFlags::ACK) {
                if seg.ack == conn.snd_nxt {
                    conn.rcv_nxt = seg.seq.wrapping_add(1);
                    out.segments
                        .push(conn.seg(TcpFlags::ACK, conn.snd_nxt, Vec::new()));
                    conn.state = TcpState::Established;
                    out.events.push(TcpEvent::Connected);
                }
            } else if seg.flags.contains(TcpFlags::SYN) {
                // Simultaneous open.
                conn.rcv_nxt = seg.seq.wrapping_add(1);
                out.segments
                    .push(conn.seg(TcpFlags::SYN | TcpFlags::ACK, conn.iss, Vec::new()));
                conn.state = TcpState::SynReceived;
            }
        }
        TcpState::SynReceived => {
            if seg.flags.contains(TcpFlags::SYN) && !seg.flags.contains(TcpFlags::ACK) {
                // Retransmitted SYN: our SYN|ACK was dropped somewhere.
                out.segments
                    .push(conn.seg(TcpFlags::SYN | TcpFlags::ACK, conn.iss, Vec::new()));
            } else if seg.flags.contains(TcpFlags::ACK) && seg.ack == conn.snd_nxt {
                conn.state = TcpState::Established;
                out.events.push(TcpEvent::Connected);
                if !seg.payload.is_empty() || seg.flags.contains(TcpFlags::FIN) {
                    on_synchronized(conn, seg, out);
                }
            }
        }
        _ => on_synchronized(conn, seg, out),
    }
}

fn on_rst(conn: &mut TcpConnection, seg: &TcpSegment, out: &mut StepOutput) {
    match conn.state {
        TcpState::Closed | TcpState::Listen => {}
        TcpState::SynSent => {
            // Connection refused: the RST must acknowledge our SYN.
            if seg.flags.contains(TcpFlags::ACK) && seg.ack == conn.snd_nxt {
                conn.state = TcpState::Closed;
                out.events.push(TcpEvent::ConnectFailed);
            }
        }
        _ => {
            // In-window RST tears down silently — the behavior the
            // connection-killer attack relies on.
            if conn.seq_in_window(seg.seq) {
                conn.state = TcpState::Closed;
                out.events.push(TcpEvent::Reset);
            }
        }
    }
}

fn on_synchronized(conn: &mut TcpConnection, seg: TcpSegment, out: &mut StepOutput) {
    let acks_snd_nxt = seg.flags.contains(TcpFlags::ACK) && seg.ack == conn.snd_nxt;
    match conn.state {
        TcpState::FinWait1 if acks_snd_nxt => conn.state = TcpState::FinWait2,
        TcpState::LastAck if acks_snd_nxt => {
            conn.state = TcpState::Closed;
            out.events.push(TcpEvent::Closed);
            return;
        }
        _ => {}
    }

    let has_fin = seg.flags.contains(TcpFlags::FIN);
    if seg.payload.is_empty() && !has_fin {
        return; // pure ACK: never answered, so ACKs cannot loop
    }

    if seg.seq != conn.rcv_nxt {
        // Duplicate or out-of-order: re-assert our position.
        out.segments
            .push(conn.seg(TcpFlags::ACK, conn.snd_nxt, Vec::new()));
        return;
    }

    let payload_ok = matches!(
        conn.state,
        TcpState::Established | TcpState::FinWait1 | TcpState::FinWait2
    );
    if payload_ok {
        if !seg.payload.is_empty() {
            conn.rcv_nxt = conn.rcv_nxt.wrapping_add(seg.payload.len() as u32);
            out.events.push(TcpEvent::Data(seg.payload));
        }
        if has_fin {
            conn.rcv_nxt = conn.rcv_nxt.wrapping_add(1);
            out.events.push(TcpEvent::PeerClosed);
            match conn.state {
                TcpState::Established => conn.state = TcpState::CloseWait,
                // FIN while ours is unacknowledged: simultaneous
                // close. The classic diagram visits CLOSING; we ACK
                // and wait out 2MSL directly.
                TcpState::FinWait1 | TcpState::FinWait2 => conn.enter_time_wait(out),
                _ => {}
            }
        }
    }
    out.segments
        .push(conn.seg(TcpFlags::ACK, conn.snd_nxt, Vec::new()));
}

/// Host-level answer for a segment that matches no connection: a RST
/// per RFC 793 §3.4 (this is also exactly what a SYN scan of a closed
/// port observes). RSTs themselves are never answered.
pub fn rst_for_unknown(seg: &TcpSegment) -> Option<TcpSegment> {
    if seg.flags.contains(TcpFlags::RST) {
        return None;
    }
    let reply = if seg.flags.contains(TcpFlags::ACK) {
        TcpSegment {
            src_port: seg.dst_port,
            dst_port: seg.src_port,
            seq: seg.ack,
            ack: 0,
            flags: TcpFlags::RST,
            window: 0,
            checksum: 0,
            payload: Vec::new(),
        }
    } else {
        TcpSegment {
            src_port: seg.dst_port,
            dst_port: seg.src_port,
            seq: 0,
            ack: seg.seq.wrapping_add(seg.seq_len()),
            flags: TcpFlags::RST | TcpFlags::ACK,
            window: 0,
            checksum: 0,
            payload: Vec::new(),
        }
    };
    Some(reply)
}
