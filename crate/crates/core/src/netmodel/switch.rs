//! Learning switch with optional SPAN (mirror) port.

use std::collections::BTreeMap;

use crate::netmodel::MacAddress;

use super::topology::HostId;

/// Index of a port within one switch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PortId(pub usize);

/// Where a forwarded frame must be delivered: zero or more regular
/// egress ports, plus at most one mirror copy out the SPAN port.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ForwardResult {
    pub egress: Vec<PortId>,
    pub span: Option<PortId>,
}

#[derive(Debug, Clone)]
pub struct Switch {
    pub name: String,
    /// Host attached to each port, in port order.
    ports: Vec<HostId>,
    learning: BTreeMap<MacAddress, PortId>,
    span_port: Option<PortId>,
}

impl Switch {
    pub fn new(name: impl Into<String>) -> Switch {
        Switch {
            name: name.into(),
            ports: Vec::new(),
            learning: BTreeMap::new(),
            span_port: None,
        }
    }

    pub fn add_port(&mut self, owner: HostId) -> PortId {
        self.ports.push(owner);
        PortId(self.ports.len() - 1)
    }

    /// Marks `port` as the SPAN mirror. It stops being a regular
    /// egress target and never sources frames into the switch.
    pub fn set_span(&mut self, port: PortId) {
        self.span_port = Some(port);
    }

    pub fn span_port(&self) -> Option<PortId> {
        self.span_port
    }

    pub fn owner(&self, port: PortId) -> HostId {
        self.ports[port.0]
    }

    pub fn port_count(&self) -> usize {
        self.ports.len()
    }

    pub fn learned_port(&self, mac: MacAddress) -> Option<PortId> {
        self.learning.get(&mac).copied()
    }

    /// Switches one frame: learns the source MAC on the ingress port,
    /// then picks egress ports — the learned port for a known unicast
    /// destination, a flood of every other port otherwise. Any frame
    /// that goes somewhere also goes out the SPAN port, byte-identical
    /// (the caller delivers the same buffer). Frames ingressing on the
    /// SPAN port itself are dropped without learning.
    pub fn forward(&mut self, ingress: PortId, src: MacAddress, dst: MacAddress) -> ForwardResult {
        if self.span_port == Some(ingress) {
            return ForwardResult {
                egress: Vec::new(),
                span: None,
            };
        }
        if !src.is_broadcast() {
            self.learning.insert(src, ingress);
        }
        let egress: Vec<PortId> = match self.learning.get(&dst) {
            Some(&port) if !dst.is_broadcast() => {
                if port == ingress {
                    Vec::new() // destination is back where it came from
                } else {
                    vec![port]
                }
            }
            _ => (0..self.ports.len())
                .map(PortId)
                .filter(|&p| p != ingress && Some(p) != self.span_port)
                .collect(),
        };
        let span = if egress.is_empty() { None } else { self.span_port };
        ForwardResult { egress, span }
    }
}
