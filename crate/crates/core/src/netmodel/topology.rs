//! The reference topology: three /24 LANs joined by one router, a
//! learning switch per LAN, and a SPAN-fed monitor watching the
//! Service LAN.

use std::collections::BTreeSet;
use std::fmt;
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

use crate::engine::SimTime;
use crate::protocols::{ArpMessage, ArpOp};

use super::arp::{ArpOrigin, ArpTable};
use super::switch::{PortId, Switch};
use super::{Cidr, MacAddress, NetError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HostId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SwitchId(pub usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OsTag {
    Windows10,
    Ubuntu,
    KaliLinux,
}

impl OsTag {
    /// Initial TTL of emitted IP packets; doubles as the scanner's
    /// OS fingerprint.
    pub fn default_ttl(self) -> u8 {
        match self {
            OsTag::Windows10 => 128,
            OsTag::Ubuntu | OsTag::KaliLinux => 64,
        }
    }
}

impl fmt::Display for OsTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OsTag::Windows10 => "windows10",
            OsTag::Ubuntu => "ubuntu",
            OsTag::KaliLinux => "kali_linux",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    FtpServer,
    WebServer,
    AdminHost,
    UserHost,
    Attacker,
    Monitor,
    Router,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ServiceKind {
    Ftp,
    Http,
    Ssh,
    Ntp,
}

impl ServiceKind {
    pub fn default_port(self) -> u16 {
        match self {
            ServiceKind::Ftp => 21,
            ServiceKind::Http => 80,
            ServiceKind::Ssh => 22,
            ServiceKind::Ntp => 123,
        }
    }

    /// NTP is the one UDP service; everything else rides TCP.
    pub fn is_tcp(self) -> bool {
        !matches!(self, ServiceKind::Ntp)
    }
}

impl fmt::Display for ServiceKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ServiceKind::Ftp => "ftp",
            ServiceKind::Http => "http",
            ServiceKind::Ssh => "ssh",
            ServiceKind::Ntp => "ntp",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SubnetKind {
    Service,
    User,
    Soc,
}

#[derive(Debug, Clone)]
pub struct Subnet {
    pub kind: SubnetKind,
    pub cidr: Cidr,
    pub switch: SwitchId,
}

#[derive(Debug, Clone)]
pub struct Interface {
    pub mac: MacAddress,
    pub ip: Ipv4Addr,
    pub subnet: Cidr,
    pub switch: SwitchId,
    pub port: PortId,
}

#[derive(Debug, Clone)]
pub struct Host {
    pub name: String,
    pub os: OsTag,
    pub role: Role,
    pub interfaces: Vec<Interface>,
    /// Listening services as (port, kind); kind decides the transport.
    pub services: Vec<(u16, ServiceKind)>,
    pub arp_table: ArpTable,
}

impl Host {
    /// The host's only interface. Routers have three; everything else
    /// exactly one, which this accessor assumes.
    pub fn iface(&self) -> &Interface {
        &self.interfaces[0]
    }

    pub fn iface_in(&self, cidr: Cidr) -> Option<&Interface> {
        self.interfaces.iter().find(|i| i.subnet == cidr)
    }

    pub fn iface_index_in(&self, cidr: Cidr) -> Option<usize> {
        self.interfaces.iter().position(|i| i.subnet == cidr)
    }

    pub fn owns_ip(&self, ip: Ipv4Addr) -> bool {
        self.interfaces.iter().any(|i| i.ip == ip)
    }

    pub fn default_ttl(&self) -> u8 {
        self.os.default_ttl()
    }

    pub fn service_on(&self, port: u16) -> Option<ServiceKind> {
        self.services
            .iter()
            .find(|(p, _)| *p == port)
            .map(|(_, kind)| *kind)
    }

    /// Standard host reaction to a received ARP message: cache the
    /// sender binding unconditionally (the modeled vulnerability),
    /// then answer who-has requests aimed at the receiving interface.
    pub fn process_arp(
        &mut self,
        iface_index: usize,
        message: &ArpMessage,
        now: SimTime,
    ) -> Option<ArpMessage> {
        if !message.sender_ip.is_unspecified() {
            let origin = if message.sender_ip == message.target_ip {
                ArpOrigin::Gratuitous
            } else {
                match message.op {
                    ArpOp::WhoHas => ArpOrigin::Request,
                    ArpOp::IsAt => ArpOrigin::Reply,
                }
            };
            self.arp_table
                .bind(message.sender_ip, message.sender_mac, now, origin);
        }
        let iface = &self.interfaces[iface_index];
        if message.op == ArpOp::WhoHas && message.target_ip == iface.ip {
            return Some(ArpMessage::is_at(
                iface.mac,
                iface.ip,
                message.sender_mac,
                message.sender_ip,
            ));
        }
        None
    }
}

#[derive(Debug, Clone)]
pub struct Topology {
    pub hosts: Vec<Host>,
    pub switches: Vec<Switch>,
    /// Always ordered Service, User, Soc.
    pub subnets: Vec<Subnet>,
    pub router: HostId,
    pub link_latency: SimTime,
}

impl Topology {
    pub fn host(&self, id: HostId) -> &Host {
        &self.hosts[id.0]
    }

    pub fn host_mut(&mut self, id: HostId) -> &mut Host {
        &mut self.hosts[id.0]
    }

    pub fn switch(&self, id: SwitchId) -> &Switch {
        &self.switches[id.0]
    }

    pub fn switch_mut(&mut self, id: SwitchId) -> &mut Switch {
        &mut self.switches[id.0]
    }

    pub fn host_ids(&self) -> impl Iterator<Item = HostId> {
        (0..self.hosts.len()).map(HostId)
    }

    pub fn host_id_by_name(&self, name: &str) -> Option<HostId> {
        self.hosts.iter().position(|h| h.name == name).map(HostId)
    }

    pub fn host_by_ip(&self, ip: Ipv4Addr) -> Option<HostId> {
        self.hosts.iter().position(|h| h.owns_ip(ip)).map(HostId)
    }

    pub fn hosts_with_role(&self, role: Role) -> impl Iterator<Item = HostId> + '_ {
        self.hosts
            .iter()
            .enumerate()
            .filter(move |(_, h)| h.role == role)
            .map(|(i, _)| HostId(i))
    }

    pub fn subnet(&self, kind: SubnetKind) -> &Subnet {
        self.subnets.iter().find(|s| s.kind == kind).unwrap()
    }

    pub fn subnet_of(&self, ip: Ipv4Addr) -> Option<&Subnet> {
        self.subnets.iter().find(|s| s.cidr.contains(ip))
    }

    /// The router interface facing `dst`, if any subnet contains it —
    /// the routing decision behind packet forwarding.
    pub fn router_iface_toward(&self, dst: Ipv4Addr) -> Option<&Interface> {
        self.host(self.router)
            .interfaces
            .iter()
            .find(|i| i.subnet.contains(dst))
    }
}

/// Overridable construction parameters; defaults reproduce the
/// reference deployment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TopologyConfig {
    pub service_subnet: Cidr,
    pub user_subnet: Cidr,
    pub soc_subnet: Cidr,
    /// Benign User-LAN hosts (the attacker is separate).
    pub user_host_count: usize,
    pub link_latency_us: u64,
}

impl Default for TopologyConfig {
    fn default() -> TopologyConfig {
        TopologyConfig {
            service_subnet: "192.168.128.0/24".parse().unwrap(),
            user_subnet: "192.168.132.0/24".parse().unwrap(),
            soc_subnet: "192.168.134.0/24".parse().unwrap(),
            user_host_count: 6,
            link_latency_us: 200,
        }
    }
}

/// Stable host addressing within each LAN (the deployment's own
/// documentation gives only the subnets).
pub mod addr {
    pub const ROUTER: u32 = 1;
    pub const FTP: u32 = 10;
    pub const WEB: u32 = 20;
    pub const ADMIN_WIN: u32 = 30;
    pub const ADMIN_UBU: u32 = 31;
    pub const USER_BASE: u32 = 10;
    pub const ATTACKER: u32 = 66;
    pub const MONITOR: u32 = 10;
}

const MAX_USER_HOSTS: usize = 40;

fn mac_for(subnet: Cidr, last_octet: u8) -> MacAddress {
    // Locally administered: 02:00:a8:<subnet third octet>:<host>:01.
    MacAddress([0x02, 0x00, 0xa8, subnet.network().octets()[2], last_octet, 0x01])
}

/// Builds the reference topology: Service LAN with FTP, web, and two
/// SSH-enabled admin hosts; User LAN with the benign hosts plus the
/// Kali attacker; SOC LAN with a monitor fed from the Service switch's
/// SPAN port; one central router.
pub fn build_reference_topology(config: &TopologyConfig) -> Result<Topology, NetError> {
    if config.user_host_count == 0 || config.user_host_count > MAX_USER_HOSTS {
        return Err(NetError::BadAddress(format!(
            "user_host_count {} outside 1..={MAX_USER_HOSTS}",
            config.user_host_count
        )));
    }
    let subnet_cidrs = [
        config.service_subnet,
        config.user_subnet,
        config.soc_subnet,
    ];
    for (i, a) in subnet_cidrs.iter().enumerate() {
        for b in &subnet_cidrs[i + 1..] {
            if a.contains(b.network()) || b.contains(a.network()) {
                return Err(NetError::ConfigConflict(format!(
                    "subnets {a} and {b} overlap"
                )));
            }
        }
    }

    let mut switches = vec![
        Switch::new("service-sw"),
        Switch::new("user-sw"),
        Switch::new("soc-sw"),
    ];
    let subnets = vec![
        Subnet {
            kind: SubnetKind::Service,
            cidr: config.service_subnet,
            switch: SwitchId(0),
        },
        Subnet {
            kind: SubnetKind::User,
            cidr: config.user_subnet,
            switch: SwitchId(1),
        },
        Subnet {
            kind: SubnetKind::Soc,
            cidr: config.soc_subnet,
            switch: SwitchId(2),
        },
    ];
    let mut hosts: Vec<Host> = Vec::new();

    let iface = |switches: &mut Vec<Switch>, subnet: &Subnet, host: HostId, last: u32| {
        let ip = subnet.cidr.host(last);
        let port = switches[subnet.switch.0].add_port(host);
        Interface {
            mac: mac_for(subnet.cidr, ip.octets()[3]),
            ip,
            subnet: subnet.cidr,
            switch: subnet.switch,
            port,
        }
    };

    // Router first: one interface per LAN, port 0 on every switch.
    let router_id = HostId(0);
    let router_ifaces = subnets
        .iter()
        .map(|s| iface(&mut switches, s, router_id, addr::ROUTER))
        .collect();
    hosts.push(Host {
        name: "router".into(),
        os: OsTag::Ubuntu,
        role: Role::Router,
        interfaces: router_ifaces,
        services: Vec::new(),
        arp_table: ArpTable::new(),
    });

    let service = &subnets[0];
    let user = &subnets[1];
    let soc = &subnets[2];

    let single = |hosts: &mut Vec<Host>,
                      switches: &mut Vec<Switch>,
                      name: &str,
                      os: OsTag,
                      role: Role,
                      subnet: &Subnet,
                      last: u32,
                      services: Vec<(u16, ServiceKind)>| {
        let id = HostId(hosts.len());
        let iface = iface(switches, subnet, id, last);
        hosts.push(Host {
            name: name.into(),
            os,
            role,
            interfaces: vec![iface],
            services,
            arp_table: ArpTable::new(),
        });
        id
    };

    single(
        &mut hosts,
        &mut switches,
        "ftp",
        OsTag::Ubuntu,
        Role::FtpServer,
        service,
        addr::FTP,
        vec![(21, ServiceKind::Ftp)],
    );
    single(
        &mut hosts,
        &mut switches,
        "web",
        OsTag::Ubuntu,
        Role::WebServer,
        service,
        addr::WEB,
        vec![(80, ServiceKind::Http), (123, ServiceKind::Ntp)],
    );
    single(
        &mut hosts,
        &mut switches,
        "admin-win",
        OsTag::Windows10,
        Role::AdminHost,
        service,
        addr::ADMIN_WIN,
        vec![(22, ServiceKind::Ssh)],
    );
    single(
        &mut hosts,
        &mut switches,
        "admin-ubu",
        OsTag::Ubuntu,
        Role::AdminHost,
        service,
        addr::ADMIN_UBU,
        vec![(22, ServiceKind::Ssh)],
    );

    for i in 0..config.user_host_count {
        let os = if i % 2 == 0 {
            OsTag::Windows10
        } else {
            OsTag::Ubuntu
        };
        single(
            &mut hosts,
            &mut switches,
            &format!("user-{i:02}"),
            os,
            Role::UserHost,
            user,
            addr::USER_BASE + i as u32,
            Vec::new(),
        );
    }

    single(
        &mut hosts,
        &mut switches,
        "attacker",
        OsTag::KaliLinux,
        Role::Attacker,
        user,
        addr::ATTACKER,
        Vec::new(),
    );
    let monitor_id = single(
        &mut hosts,
        &mut switches,
        "monitor",
        OsTag::KaliLinux,
        Role::Monitor,
        soc,
        addr::MONITOR,
        Vec::new(),
    );

    // The monitor's capture leg: an extra Service-switch port carrying
    // no interface, marked as the SPAN mirror.
    let span = switches[0].add_port(monitor_id);
    switches[0].set_span(span);

    let mut seen_ips = BTreeSet::new();
    let mut seen_macs = BTreeSet::new();
    for host in &hosts {
        for iface in &host.interfaces {
            if !seen_ips.insert(iface.ip) {
                return Err(NetError::ConfigConflict(format!(
                    "duplicate address {}",
                    iface.ip
                )));
            }
            if !seen_macs.insert(iface.mac) {
                return Err(NetError::ConfigConflict(format!(
                    "duplicate mac {}",
                    iface.mac
                )));
            }
            if !iface.subnet.contains(iface.ip) {
                return Err(NetError::ConfigConflict(format!(
                    "{} outside {}",
                    iface.ip, iface.subnet
                )));
            }
        }
    }

    Ok(Topology {
        hosts,
        switches,
        subnets,
        router: router_id,
        link_latency: SimTime::from_micros(config.link_latency_us),
    })
}
