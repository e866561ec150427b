//! Wire codecs and the TCP state machine.
//!
//! Everything here is a pure function or a plain value type; all I/O
//! and timing lives with the callers.

mod checksum;
mod tcp;
mod wire;

pub use checksum::{checksum_verifies, inet_checksum, l4_checksum, l4_checksum_verifies};
pub use tcp::{
    rst_for_unknown, tcp_step, Endpoint, StepOutput, TcpConnection, TcpError, TcpEvent, TcpInput,
    TcpState, TCP_MSS, TCP_WINDOW, TIME_WAIT_DURATION,
};
pub use wire::{
    decode_frame, encode_frame, ArpMessage, ArpOp, CodecError, Decoded, EtherPayload,
    EthernetFrame, IcmpMessage, IgmpMessage, IpPayload, Ipv4Packet, TcpFlags, TcpSegment,
    UdpDatagram, ETHERTYPE_ARP, ETHERTYPE_IPV4, ICMP_ECHO_REPLY, ICMP_ECHO_REQUEST,
    ICMP_TIME_EXCEEDED, ICMP_UNREACHABLE, IGMP_MEMBERSHIP_QUERY, IGMP_V2_MEMBERSHIP_REPORT,
    IPPROTO_ICMP, IPPROTO_IGMP, IPPROTO_TCP, IPPROTO_UDP, MIN_FRAME_LEN,
};
