//! Network model: addresses, the reference topology, learning switches
//! with SPAN mirroring, and deliberately poisonable ARP caches.

mod addresses;
mod arp;
mod switch;
mod topology;

pub use addresses::{Cidr, MacAddress};
pub use arp::{ArpEntry, ArpOrigin, ArpTable};
pub use switch::{ForwardResult, PortId, Switch};
pub use topology::{
    addr, build_reference_topology, Host, HostId, Interface, OsTag, Role, ServiceKind, Subnet,
    SubnetKind, SwitchId, Topology, TopologyConfig,
};

use thiserror::Error;

/// Errors from topology construction and address parsing.
#[derive(Debug, Error)]
pub enum NetError {
    /// An address or CIDR string failed to parse or is out of range.
    #[error("bad address: {0}")]
    BadAddress(String),
    /// Two interfaces were configured with the same address.
    #[error("address conflict: {0}")]
    ConfigConflict(String),
}
