//! Host ARP caches with deliberately vulnerable update semantics.
//!
//! Every ARP message's sender binding is written unconditionally —
//! unsolicited replies and gratuitous announcements included, and
//! entries never expire within a run. This is the modeled weakness
//! that makes ARP poisoning work.

use std::collections::BTreeMap;
use std::net::Ipv4Addr;

use crate::engine::SimTime;
use crate::netmodel::MacAddress;

/// How an entry got into the table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArpOrigin {
    /// Learned from the sender fields of a who-has request.
    Request,
    /// Learned from an is-at reply (solicited or not).
    Reply,
    /// Learned from a gratuitous message (sender IP == target IP).
    Gratuitous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ArpEntry {
    pub mac: MacAddress,
    pub updated: SimTime,
    pub origin: ArpOrigin,
}

#[derive(Debug, Clone, Default)]
pub struct ArpTable {
    entries: BTreeMap<Ipv4Addr, ArpEntry>,
}

impl ArpTable {
    pub fn new() -> ArpTable {
        ArpTable::default()
    }

    pub fn lookup(&self, ip: Ipv4Addr) -> Option<MacAddress> {
        self.entries.get(&ip).map(|e| e.mac)
    }

    pub fn entry(&self, ip: Ipv4Addr) -> Option<&ArpEntry> {
        self.entries.get(&ip)
    }

    /// Writes the binding unconditionally, overwriting whatever was
    /// there. At most one entry per IP by map construction.
    pub fn bind(&mut self, ip: Ipv4Addr, mac: MacAddress, now: SimTime, origin: ArpOrigin) {
        self.entries.insert(
            ip,
            ArpEntry {
                mac,
                updated: now,
                origin,
            },
        );
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Ipv4Addr, &ArpEntry)> {
        self.entries.iter()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REAL: MacAddress = MacAddress([0x02, 0x00, 0xa8, 0x84, 0x01, 0x01]);
    const FORGED: MacAddress = MacAddress([0x02, 0x00, 0xa8, 0x84, 0x42, 0x01]);

    #[test]
    fn later_bindings_overwrite_unconditionally() {
        let router = Ipv4Addr::new(192, 168, 132, 1);
        let mut table = ArpTable::new();
        table.bind(router, REAL, SimTime::from_secs(1), ArpOrigin::Reply);
        assert_eq!(table.lookup(router), Some(REAL));

        // The poisoning step: an unsolicited reply naming the same IP.
        table.bind(router, FORGED, SimTime::from_secs(2), ArpOrigin::Reply);
        assert_eq!(table.lookup(router), Some(FORGED));
        assert_eq!(table.len(), 1, "at most one entry per IP");
        assert_eq!(table.entry(router).unwrap().updated, SimTime::from_secs(2));
    }

    #[test]
    fn entries_never_expire() {
        let ip = Ipv4Addr::new(192, 168, 132, 10);
        let mut table = ArpTable::new();
        table.bind(ip, REAL, SimTime::ZERO, ArpOrigin::Request);
        // No sweep API exists; a lookup arbitrarily far in the future
        // still answers.
        assert_eq!(table.lookup(ip), Some(REAL));
    }
}
