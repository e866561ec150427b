//! Byte-exact wire codecs for Ethernet II, ARP, IPv4, ICMP, IGMPv2,
//! TCP (fixed 20-byte header), and UDP.
//!
//! Encoding is strict: reserved fields are written as zero and all
//! checksums are expected to be filled in (the [`Ipv4Packet::new`]
//! constructor computes them). Decoding is lenient about checksums —
//! a mismatch sets a flag rather than failing, since malicious traffic
//! may be deliberately malformed and must still be representable.

use std::fmt;
use std::net::Ipv4Addr;
use std::ops::{BitOr, BitOrAssign};

use thiserror::Error;

use super::checksum::{checksum_verifies, inet_checksum, l4_checksum, l4_checksum_verifies};
use crate::netmodel::MacAddress;

pub const ETHERTYPE_IPV4: u16 = 0x0800;
pub const ETHERTYPE_ARP: u16 = 0x0806;
/// Minimum Ethernet frame length before the (omitted) FCS; shorter
/// frames are zero-padded up to this.
pub const MIN_FRAME_LEN: usize = 60;

pub const IPPROTO_ICMP: u8 = 1;
pub const IPPROTO_IGMP: u8 = 2;
pub const IPPROTO_TCP: u8 = 6;
pub const IPPROTO_UDP: u8 = 17;

/// Decode failures. Checksum mismatches are deliberately absent: they
/// are reported via [`Decoded::checksums_ok`] instead.
#[derive(Debug, Error)]
pub enum CodecError {
    #[error("truncated {layer}: need {need} bytes, have {have}")]
    Truncated {
        layer: &'static str,
        need: usize,
        have: usize,
    },
    #[error("malformed {layer} header: {reason}")]
    BadHeader { layer: &'static str, reason: String },
}

fn bad(layer: &'static str, reason: impl Into<String>) -> CodecError {
    CodecError::BadHeader {
        layer,
        reason: reason.into(),
    }
}

fn need(layer: &'static str, need_len: usize, have: usize) -> Result<(), CodecError> {
    if have < need_len {
        Err(CodecError::Truncated {
            layer,
            need: need_len,
            have,
        })
    } else {
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Ethernet

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EthernetFrame {
    pub dst: MacAddress,
    pub src: MacAddress,
    pub payload: EtherPayload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum EtherPayload {
    Arp(ArpMessage),
    Ipv4(Ipv4Packet),
    /// Unrecognized ethertype; raw payload preserved byte-exactly.
    Other { ethertype: u16, bytes: Vec<u8> },
}

impl EtherPayload {
    pub fn ethertype(&self) -> u16 {
        match self {
            EtherPayload::Arp(_) => ETHERTYPE_ARP,
            EtherPayload::Ipv4(_) => ETHERTYPE_IPV4,
            EtherPayload::Other { ethertype, .. } => *ethertype,
        }
    }
}

impl EthernetFrame {
    pub fn ipv4(&self) -> Option<&Ipv4Packet> {
        match &self.payload {
            EtherPayload::Ipv4(packet) => Some(packet),
            _ => None,
        }
    }

    pub fn arp(&self) -> Option<&ArpMessage> {
        match &self.payload {
            EtherPayload::Arp(message) => Some(message),
            _ => None,
        }
    }
}

/// A decoded frame plus the verdict of checksum verification across
/// every layer that carries one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Decoded {
    pub frame: EthernetFrame,
    pub checksums_ok: bool,
}

// ---------------------------------------------------------------------------
// ARP

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArpOp {
    /// Operation 1: request ("who has <target_ip>?").
    WhoHas,
    /// Operation 2: reply ("<sender_ip> is at <sender_mac>").
    IsAt,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ArpMessage {
    pub op: ArpOp,
    pub sender_mac: MacAddress,
    pub sender_ip: Ipv4Addr,
    pub target_mac: MacAddress,
    pub target_ip: Ipv4Addr,
}

impl ArpMessage {
    pub fn who_has(sender_mac: MacAddress, sender_ip: Ipv4Addr, target_ip: Ipv4Addr) -> Self {
        ArpMessage {
            op: ArpOp::WhoHas,
            sender_mac,
            sender_ip,
            target_mac: MacAddress::ZERO,
            target_ip,
        }
    }

    pub fn is_at(
        sender_mac: MacAddress,
        sender_ip: Ipv4Addr,
        target_mac: MacAddress,
        target_ip: Ipv4Addr,
    ) -> Self {
        ArpMessage {
            op: ArpOp::IsAt,
            sender_mac,
            sender_ip,
            target_mac,
            target_ip,
        }
    }
}

// ---------------------------------------------------------------------------
// IPv4

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ipv4Packet {
    pub src: Ipv4Addr,
    pub dst: Ipv4Addr,
    pub ttl: u8,
    pub identification: u16,
    /// Stored header checksum; [`Ipv4Packet::new`] fills it, mutators
    /// must call [`Ipv4Packet::refresh_header_checksum`].
    pub header_checksum: u16,
    pub payload: IpPayload,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IpPayload {
    Icmp(IcmpMessage),
    Igmp(IgmpMessage),
    Tcp(TcpSegment),
    Udp(UdpDatagram),
    /// Unrecognized IP protocol; raw bytes preserved.
    Other { protocol: u8, bytes: Vec<u8> },
}

impl IpPayload {
    pub fn protocol(&self) -> u8 {
        match self {
            IpPayload::Icmp(_) => IPPROTO_ICMP,
            IpPayload::Igmp(_) => IPPROTO_IGMP,
            IpPayload::Tcp(_) => IPPROTO_TCP,
            IpPayload::Udp(_) => IPPROTO_UDP,
            IpPayload::Other { protocol, .. } => *protocol,
        }
    }

    fn encoded_len(&self) -> usize {
        match self {
            IpPayload::Icmp(m) => 8 + m.payload.len(),
            IpPayload::Igmp(_) => 8,
            IpPayload::Tcp(seg) => 20 + seg.payload.len(),
            IpPayload::Udp(d) => 8 + d.payload.len(),
            IpPayload::Other { bytes, .. } => bytes.len(),
        }
    }
}

impl Ipv4Packet {
    /// Assembles a packet and computes every checksum it carries: the
    /// L4 checksum of the payload (pseudo-header included for TCP/UDP)
    /// and then the IPv4 header checksum.
    pub fn new(
        src: Ipv4Addr,
        dst: Ipv4Addr,
        ttl: u8,
        identification: u16,
        mut payload: IpPayload,
    ) -> Ipv4Packet {
        match &mut payload {
            IpPayload::Tcp(seg) => {
                seg.checksum = 0;
                seg.checksum = l4_checksum(src, dst, IPPROTO_TCP, &tcp_bytes(seg));
            }
            IpPayload::Udp(d) => {
                d.checksum = 0;
                d.checksum = l4_checksum(src, dst, IPPROTO_UDP, &udp_bytes(d));
            }
            IpPayload::Icmp(m) => {
                m.checksum = 0;
                m.checksum = inet_checksum(&icmp_bytes(m));
            }
            IpPayload::Igmp(m) => {
                m.checksum = 0;
                m.checksum = inet_checksum(&igmp_bytes(m));
            }
            IpPayload::Other { .. } => {}
        }
        let mut packet = Ipv4Packet {
            src,
            dst,
            ttl,
            identification,
            header_checksum: 0,
            payload,
        };
        packet.refresh_header_checksum();
        packet
    }

    /// Total length field value: header plus payload bytes.
    pub fn total_length(&self) -> u16 {
        (20 + self.payload.encoded_len()) as u16
    }

    /// Recomputes the header checksum after a header mutation (e.g. a
    /// TTL decrement while forwarding). L4 checksums are unaffected:
    /// the pseudo-header covers only addresses, protocol, and length.
    pub fn refresh_header_checksum(&mut self) {
        self.header_checksum = 0;
        self.header_checksum = inet_checksum(&self.header_bytes());
    }

    fn header_bytes(&self) -> [u8; 20] {
        let mut h = [0u8; 20];
        h[0] = 0x45; // version 4, IHL 5
        h[2..4].copy_from_slice(&self.total_length().to_be_bytes());
        h[4..6].copy_from_slice(&self.identification.to_be_bytes());
        h[8] = self.ttl;
        h[9] = self.payload.protocol();
        h[10..12].copy_from_slice(&self.header_checksum.to_be_bytes());
        h[12..16].copy_from_slice(&self.src.octets());
        h[16..20].copy_from_slice(&self.dst.octets());
        h
    }
}

// ---------------------------------------------------------------------------
// ICMP / IGMP

pub const ICMP_ECHO_REPLY: u8 = 0;
pub const ICMP_UNREACHABLE: u8 = 3;
pub const ICMP_ECHO_REQUEST: u8 = 8;
pub const ICMP_TIME_EXCEEDED: u8 = 11;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IcmpMessage {
    pub icmp_type: u8,
    pub code: u8,
    pub checksum: u16,
    /// Identifier for echo messages; zero in error messages, where the
    /// second header word is unused.
    pub id: u16,
    pub seq: u16,
    pub payload: Vec<u8>,
}

impl IcmpMessage {
    pub fn echo_request(id: u16, seq: u16, payload: Vec<u8>) -> Self {
        IcmpMessage {
            icmp_type: ICMP_ECHO_REQUEST,
            code: 0,
            checksum: 0,
            id,
            seq,
            payload,
        }
    }

    pub fn echo_reply(id: u16, seq: u16, payload: Vec<u8>) -> Self {
        IcmpMessage {
            icmp_type: ICMP_ECHO_REPLY,
            code: 0,
            checksum: 0,
            id,
            seq,
            payload,
        }
    }

    /// An ICMP error message quoting the offending packet's header and
    /// first eight payload bytes, per convention.
    pub fn error(icmp_type: u8, code: u8, offending: &Ipv4Packet) -> Self {
        let encoded = ipv4_bytes(offending);
        let quoted = encoded[..encoded.len().min(28)].to_vec();
        IcmpMessage {
            icmp_type,
            code,
            checksum: 0,
            id: 0,
            seq: 0,
            payload: quoted,
        }
    }

    pub fn is_echo_request(&self) -> bool {
        self.icmp_type == ICMP_ECHO_REQUEST
    }

    pub fn is_echo_reply(&self) -> bool {
        self.icmp_type == ICMP_ECHO_REPLY
    }
}

pub const IGMP_MEMBERSHIP_QUERY: u8 = 0x11;
pub const IGMP_V2_MEMBERSHIP_REPORT: u8 = 0x16;

/// IGMPv2 message: modeled at message granularity only, no group
/// state machine behind it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IgmpMessage {
    pub igmp_type: u8,
    pub max_resp_time: u8,
    pub checksum: u16,
    pub group: Ipv4Addr,
}

impl IgmpMessage {
    pub fn v2_report(group: Ipv4Addr) -> Self {
        IgmpMessage {
            igmp_type: IGMP_V2_MEMBERSHIP_REPORT,
            max_resp_time: 0,
            checksum: 0,
            group,
        }
    }

    pub fn query(group: Ipv4Addr, max_resp_time: u8) -> Self {
        IgmpMessage {
            igmp_type: IGMP_MEMBERSHIP_QUERY,
            max_resp_time,
            checksum: 0,
            group,
        }
    }
}

// ---------------------------------------------------------------------------
// TCP / UDP

/// TCP flag bits in wire order (FIN lowest).
#[derive(Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct TcpFlags(pub u8);

impl TcpFlags {
    pub const NONE: TcpFlags = TcpFlags(0);
    pub const FIN: TcpFlags = TcpFlags(0x01);
    pub const SYN: TcpFlags = TcpFlags(0x02);
    pub const RST: TcpFlags = TcpFlags(0x04);
    pub const PSH: TcpFlags = TcpFlags(0x08);
    pub const ACK: TcpFlags = TcpFlags(0x10);

    pub fn contains(self, other: TcpFlags) -> bool {
        self.0 & other.0 == other.0
    }
}

impl BitOr for TcpFlags {
    type Output = TcpFlags;

    fn bitor(self, rhs: TcpFlags) -> TcpFlags {
        TcpFlags(self.0 | rhs.0)
    }
}

impl BitOrAssign for TcpFlags {
    fn bitor_assign(&mut self, rhs: TcpFlags) {
        self.0 |= rhs.0;
    }
}

impl fmt::Display for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names = [
            (TcpFlags::SYN, "SYN"),
            (TcpFlags::ACK, "ACK"),
            (TcpFlags::PSH, "PSH"),
            (TcpFlags::RST, "RST"),
            (TcpFlags::FIN, "FIN"),
        ];
        let mut first = true;
        for (flag, name) in names {
            if self.contains(flag) {
                if !first {
                    f.write_str("|")?;
                }
                f.write_str(name)?;
                first = false;
            }
        }
        if first {
            f.write_str("none")?;
        }
        Ok(())
    }
}

impl fmt::Debug for TcpFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TcpSegment {
    pub src_port: u16,
    pub dst_port: u16,
    pub seq: u32,
    pub ack: u32,
    pub flags: TcpFlags,
    pub window: u16,
    pub checksum: u16,
    pub payload: Vec<u8>,
}

impl TcpSegment {
    /// Sequence space the segment occupies: payload bytes plus one for
    /// SYN and one for FIN.
    pub fn seq_len(&self) -> u32 {
        let mut len = self.payload.len() as u32;
        if self.flags.contains(TcpFlags::SYN) {
            len += 1;
        }
        if self.flags.contains(TcpFlags::FIN) {
            len += 1;
        }
        len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UdpDatagram {
    pub src_port: u16,
    pub dst_port: u16,
    pub checksum: u16,
    pub payload: Vec<u8>,
}

// ---------------------------------------------------------------------------
// Encoding

/// Serializes a frame to wire bytes, zero-padding to the Ethernet
/// minimum of 60 bytes (FCS omitted, as in capture files).
pub fn encode_frame(frame: &EthernetFrame) -> Vec<u8> {
    let mut out = Vec::with_capacity(MIN_FRAME_LEN);
    out.extend_from_slice(&frame.dst.octets());
    out.extend_from_slice(&frame.src.octets());
    out.extend_from_slice(&frame.payload.ethertype().to_be_bytes());
    match &frame.payload {
        EtherPayload::Arp(message) => out.extend_from_slice(&arp_bytes(message)),
        EtherPayload::Ipv4(packet) => out.extend_from_slice(&ipv4_bytes(packet)),
        EtherPayload::Other { bytes, .. } => out.extend_from_slice(bytes),
    }
    if out.len() < MIN_FRAME_LEN {
        out.resize(MIN_FRAME_LEN, 0);
    }
    out
}

fn arp_bytes(message: &ArpMessage) -> [u8; 28] {
    let mut b = [0u8; 28];
    b[0..2].copy_from_slice(&1u16.to_be_bytes()); // hardware type: Ethernet
    b[2..4].copy_from_slice(&ETHERTYPE_IPV4.to_be_bytes());
    b[4] = 6;
    b[5] = 4;
    let op: u16 = match message.op {
        ArpOp::WhoHas => 1,
        ArpOp::IsAt => 2,
    };
    b[6..8].copy_from_slice(&op.to_be_bytes());
    b[8..14].copy_from_slice(&message.sender_mac.octets());
    b[14..18].copy_from_slice(&message.sender_ip.octets());
    b[18..24].copy_from_slice(&message.target_mac.octets());
    b[24..28].copy_from_slice(&message.target_ip.octets());
    b
}

fn ipv4_bytes(packet: &Ipv4Packet) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + packet.payload.encoded_len());
    out.extend_from_slice(&packet.header_bytes());
    match &packet.payload {
        IpPayload::Icmp(m) => out.extend_from_slice(&icmp_bytes(m)),
        IpPayload::Igmp(m) => out.extend_from_slice(&igmp_bytes(m)),
        IpPayload::Tcp(seg) => out.extend_from_slice(&tcp_bytes(seg)),
        IpPayload::Udp(d) => out.extend_from_slice(&udp_bytes(d)),
        IpPayload::Other { bytes, .. } => out.extend_from_slice(bytes),
    }
    out
}

fn icmp_bytes(m: &IcmpMessage) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + m.payload.len());
    out.push(m.icmp_type);
    out.push(m.code);
    out.extend_from_slice(&m.checksum.to_be_bytes());
    out.extend_from_slice(&m.id.to_be_bytes());
    out.extend_from_slice(&m.seq.to_be_bytes());
    out.extend_from_slice(&m.payload);
    out
}

fn igmp_bytes(m: &IgmpMessage) -> [u8; 8] {
    let mut b = [0u8; 8];
    b[0] = m.igmp_type;
    b[1] = m.max_resp_time;
    b[2..4].copy_from_slice(&m.checksum.to_be_bytes());
    b[4..8].copy_from_slice(&m.group.octets());
    b
}

fn tcp_bytes(seg: &TcpSegment) -> Vec<u8> {
    let mut out = Vec::with_capacity(20 + seg.payload.len());
    out.extend_from_slice(&seg.src_port.to_be_bytes());
    out.extend_from_slice(&seg.dst_port.to_be_bytes());
    out.extend_from_slice(&seg.seq.to_be_bytes());
    out.extend_from_slice(&seg.ack.to_be_bytes());
    // Data offset 5 (no options), reserved zero, flag bits.
    out.extend_from_slice(&((5u16 << 12) | u16::from(seg.flags.0)).to_be_bytes());
    out.extend_from_slice(&seg.window.to_be_bytes());
    out.extend_from_slice(&seg.checksum.to_be_bytes());
    out.extend_from_slice(&0u16.to_be_bytes()); // urgent pointer
    out.extend_from_slice(&seg.payload);
    out
}

fn udp_bytes(d: &UdpDatagram) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + d.payload.len());
    out.extend_from_slice(&d.src_port.to_be_bytes());
    out.extend_from_slice(&d.dst_port.to_be_bytes());
    out.extend_from_slice(&((8 + d.payload.len()) as u16).to_be_bytes());
    out.extend_from_slice(&d.checksum.to_be_bytes());
    out.extend_from_slice(&d.payload);
    out
}

// ---------------------------------------------------------------------------
// Decoding

/// Parses wire bytes back into a structured frame.
///
/// Checksum mismatches do not fail the parse; they clear
/// [`Decoded::checksums_ok`] so captures can preserve malformed
/// traffic byte-exactly while still reporting it.
pub fn decode_frame(bytes: &[u8]) -> Result<Decoded, CodecError> {
    need("ethernet", 14, bytes.len())?;
    let dst = MacAddress(bytes[0..6].try_into().unwrap());
    let src = MacAddress(bytes[6..12].try_into().unwrap());
    let ethertype = u16::from_be_bytes([bytes[12], bytes[13]]);
    let rest = &bytes[14..];
    let (payload, checksums_ok) = match ethertype {
        ETHERTYPE_ARP => (EtherPayload::Arp(decode_arp(rest)?), true),
        ETHERTYPE_IPV4 => {
            let (packet, ok) = decode_ipv4(rest)?;
            (EtherPayload::Ipv4(packet), ok)
        }
        other => (
            EtherPayload::Other {
                ethertype: other,
                bytes: rest.to_vec(),
            },
            true,
        ),
    };
    Ok(Decoded {
        frame: EthernetFrame { dst, src, payload },
        checksums_ok,
    })
}

fn decode_arp(bytes: &[u8]) -> Result<ArpMessage, CodecError> {
    need("arp", 28, bytes.len())?;
    if bytes[0..2] != [0, 1] || bytes[2..4] != ETHERTYPE_IPV4.to_be_bytes() {
        return Err(bad("arp", "not an Ethernet/IPv4 binding"));
    }
    if bytes[4] != 6 || bytes[5] != 4 {
        return Err(bad("arp", "unexpected address lengths"));
    }
    let op = match u16::from_be_bytes([bytes[6], bytes[7]]) {
        1 => ArpOp::WhoHas,
        2 => ArpOp::IsAt,
        other => return Err(bad("arp", format!("unknown operation {other}"))),
    };
    Ok(ArpMessage {
        op,
        sender_mac: MacAddress(bytes[8..14].try_into().unwrap()),
        sender_ip: Ipv4Addr::from(<[u8; 4]>::try_from(&bytes[14..18]).unwrap()),
        target_mac: MacAddress(bytes[18..24].try_into().unwrap()),
        target_ip: Ipv4Addr::from(<[u8; 4]>::try_from(&bytes[24..28]).unwrap()),
    })
}

fn decode_ipv4(bytes: &[u8]) -> Result<(Ipv4Packet, bool), CodecError> {
    need("ipv4", 20, bytes.len())?;
    if bytes[0] >> 4 != 4 {
        return Err(bad("ipv4", format!("version {}", bytes[0] >> 4)));
    }
    if bytes[0] & 0x0F != 5 {
        return Err(bad("ipv4", "options are not supported"));
    }
    let total_length = u16::from_be_bytes([bytes[2], bytes[3]]) as usize;
    if total_length < 20 {
        return Err(bad("ipv4", format!("total length {total_length}")));
    }
    // Anything past total_length is Ethernet padding.
    need("ipv4", total_length, bytes.len())?;
    let body = &bytes[..total_length];
    if u16::from_be_bytes([body[6], body[7]]) & 0x3FFF != 0 {
        return Err(bad("ipv4", "fragmentation is not supported"));
    }
    let header_ok = checksum_verifies(&body[..20]);
    let src = Ipv4Addr::from(<[u8; 4]>::try_from(&body[12..16]).unwrap());
    let dst = Ipv4Addr::from(<[u8; 4]>::try_from(&body[16..20]).unwrap());
    let protocol = body[9];
    let l4 = &body[20..];
    let (payload, l4_ok) = match protocol {
        IPPROTO_ICMP => decode_icmp(l4)?,
        IPPROTO_IGMP => decode_igmp(l4)?,
        IPPROTO_TCP => decode_tcp(l4, src, dst)?,
        IPPROTO_UDP => decode_udp(l4, src, dst)?,
        other => (
            IpPayload::Other {
                protocol: other,
                bytes: l4.to_vec(),
            },
            true,
        ),
    };
    let packet = Ipv4Packet {
        src,
        dst,
        ttl: body[8],
        identification: u16::from_be_bytes([body[4], body[5]]),
        header_checksum: u16::from_be_bytes([body[10], body[11]]),
        payload,
    };
    Ok((packet, header_ok && l4_ok))
}

fn decode_icmp(bytes: &[u8]) -> Result<(IpPayload, bool), CodecError> {
    need("icmp", 8, bytes.len())?;
    let message = IcmpMessage {
        icmp_type: bytes[0],
        code: bytes[1],
        checksum: u16::from_be_bytes([bytes[2], bytes[3]]),
        id: u16::from_be_bytes([bytes[4], bytes[5]]),
        seq: u16::from_be_bytes([bytes[6], bytes[7]]),
        payload: bytes[8..].to_vec(),
    };
    Ok((IpPayload::Icmp(message), checksum_verifies(bytes)))
}

fn decode_igmp(bytes: &[u8]) -> Result<(IpPayload, bool), CodecError> {
    if bytes.len() != 8 {
        return Err(bad("igmp", format!("length {} != 8", bytes.len())));
    }
    let message = IgmpMessage {
        igmp_type: bytes[0],
        max_resp_time: bytes[1],
        checksum: u16::from_be_bytes([bytes[2], bytes[3]]),
        group: Ipv4Addr::from(<[u8; 4]>::try_from(&bytes[4..8]).unwrap()),
    };
    Ok((IpPayload::Igmp(message), checksum_verifies(bytes)))
}

fn decode_tcp(bytes: &[u8], src: Ipv4Addr, dst: Ipv4Addr) -> Result<(IpPayload, bool), CodecError> {
    need("tcp", 20, bytes.len())?;
    let offset = bytes[12] >> 4;
    if offset != 5 {
        return Err(bad("tcp", format!("data offset {offset}, options unsupported")));
    }
    let segment = TcpSegment {
        src_port: u16::from_be_bytes([bytes[0], bytes[1]]),
        dst_port: u16::from_be_bytes([bytes[2], bytes[3]]),
        seq: u32::from_be_bytes(bytes[4..8].try_into().unwrap()),
        ack: u32::from_be_bytes(bytes[8..12].try_into().unwrap()),
        flags: TcpFlags(bytes[13]),
        window: u16::from_be_bytes([bytes[14], bytes[15]]),
        checksum: u16::from_be_bytes([bytes[16], bytes[17]]),
        payload: bytes[20..].to_vec(),
    };
    let ok = l4_checksum_verifies(src, dst, IPPROTO_TCP, bytes);
    Ok((IpPayload::Tcp(segment), ok))
}

fn decode_udp(bytes: &[u8], src: Ipv4Addr, dst: Ipv4Addr) -> Result<(IpPayload, bool), CodecError> {
    need("udp", 8, bytes.len())?;
    let length = u16::from_be_bytes([bytes[4], bytes[5]]) as usize;
    if length != bytes.len() {
        return Err(bad(
            "udp",
            format!("length field {length} != {}", bytes.len()),
        ));
    }
    let datagram = UdpDatagram {
        src_port: u16::from_be_bytes([bytes[0], bytes[1]]),
        dst_port: u16::from_be_bytes([bytes[2], bytes[3]]),
        checksum: u16::from_be_bytes([bytes[6], bytes[7]]),
        payload: bytes[8..].to_vec(),
    };
    // Checksum zero means "not computed" for UDP over IPv4.
    let ok = datagram.checksum == 0 || l4_checksum_verifies(src, dst, IPPROTO_UDP, bytes);
    Ok((IpPayload::Udp(datagram), ok))
}
