//! Internet ones'-complement checksum (RFC 1071).

use std::net::Ipv4Addr;

/// Computes the internet checksum over `data`.
///
/// Odd-length input is padded with one zero byte for summation. The
/// result is the ones' complement of the ones'-complement sum of all
/// 16-bit big-endian words, so a buffer summed together with its own
/// correct checksum folds to zero.
pub fn inet_checksum(data: &[u8]) -> u16 {
    !fold(sum_words(data))
}

/// Verifies a buffer whose checksum field is already filled in: the
/// total sum must fold to 0xFFFF.
pub fn checksum_verifies(data: &[u8]) -> bool {
    fold(sum_words(data)) == 0xFFFF
}

/// Checksum for a TCP or UDP payload, covering the IPv4 pseudo-header
/// (source, destination, protocol, L4 length) plus the segment bytes.
pub fn l4_checksum(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, segment: &[u8]) -> u16 {
    !fold(pseudo_sum(src, dst, protocol, segment.len()) + sum_words(segment))
}

/// Pseudo-header-aware verification for a segment with its checksum
/// field filled in.
pub fn l4_checksum_verifies(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, segment: &[u8]) -> bool {
    fold(pseudo_sum(src, dst, protocol, segment.len()) + sum_words(segment)) == 0xFFFF
}

fn pseudo_sum(src: Ipv4Addr, dst: Ipv4Addr, protocol: u8, len: usize) -> u32 {
    sum_words(&src.octets()) + sum_words(&dst.octets()) + u32::from(protocol) + len as u32
}

fn sum_words(data: &[u8]) -> u32 {
    let mut sum = 0u32;
    let mut chunks = data.chunks_exact(2);
    for word in &mut chunks {
        sum += u32::from(u16::from_be_bytes([word[0], word[1]]));
    }
    if let [last] = chunks.remainder() {
        sum += u32::from(u16::from_be_bytes([*last, 0]));
    }
    sum
}

fn fold(mut sum: u32) -> u16 {
    while sum >> 16 != 0 {
        sum = (sum & 0xFFFF) + (sum >> 16);
    }
    sum as u16
}
