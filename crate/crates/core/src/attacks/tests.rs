use std::collections::{BTreeMap, BTreeSet};
use std::net::Ipv4Addr;

use super::*;
use crate::capture::LabelTag;
use crate::engine::{Scheduler, SimTime};
use crate::netmodel::{build_reference_topology, HostId, ServiceKind, TopologyConfig};
use crate::protocols::EthernetFrame;
use crate::sim::{
    Action, AgentHub, AgentNotice, CapacityConfig, Net, Provenance, Tap, World,
};

fn ip(s: &str) -> Ipv4Addr {
    s.parse().unwrap()
}

#[test]
fn wordlists_are_deterministic_per_seed() {
    let a = Wordlist::generate(7, "bf", 100);
    let b = Wordlist::generate(7, "bf", 100);
    assert_eq!(a.pairs, b.pairs);
    assert_eq!(a.success_index, b.success_index);
    let c = Wordlist::generate(8, "bf", 100);
    assert_ne!(a.pairs, c.pairs);
}

#[test]
fn wordlist_pairs_are_distinct_with_a_planted_winner() {
    let list = Wordlist::generate(7, "bf", 200);
    assert_eq!(list.pairs.len(), 200);
    let unique: BTreeSet<_> = list.pairs.iter().collect();
    assert_eq!(unique.len(), 200, "candidate pairs must not repeat");
    let index = list.success_index.unwrap();
    assert!(index < 200);
    assert_eq!(list.planted_pair().unwrap(), &list.pairs[index]);
    assert!(Wordlist::generate(7, "bf", 0).planted_pair().is_none());
}

#[test]
fn ttl_separates_the_os_families() {
    for ttl in [65, 100, 127, 128, 255] {
        assert_eq!(OsGuess::from_ttl(ttl), OsGuess::Windows, "ttl {ttl}");
    }
    for ttl in [1, 32, 63, 64] {
        assert_eq!(OsGuess::from_ttl(ttl), OsGuess::Linux, "ttl {ttl}");
    }
}

#[test]
fn phase_labels_match_their_attacks() {
    let target = ip("192.168.128.20");
    let scan = PhaseSpec::Scan {
        targets: Vec::new(),
        probe_gap: SimTime::from_millis(10),
    };
    assert_eq!(scan.label(), LabelTag::MitmScan);
    let poison = PhaseSpec::Poison {
        pairs: Vec::new(),
        period: SimTime::from_secs(2),
        until: SimTime::from_secs(60),
        audit: false,
    };
    assert_eq!(poison.label(), LabelTag::MitmArp);
    let psh = PhaseSpec::PshAckFlood {
        target,
        port: 80,
        rate: 100,
        until: SimTime::from_secs(60),
        spoof: false,
    };
    assert_eq!(psh.label(), LabelTag::DosPshAck);
    let mixed = PhaseSpec::IcmpIgmpFlood {
        target,
        rate: 100,
        icmp_fraction: 0.5,
        until: SimTime::from_secs(60),
        spoof: false,
    };
    assert_eq!(mixed.label(), LabelTag::DosIcmpIgmp);
    let kill = PhaseSpec::TcpKill {
        pairs: Vec::new(),
        period: SimTime::from_secs(2),
        until: SimTime::from_secs(60),
    };
    assert_eq!(kill.label(), LabelTag::DosTcpKill);
    for (service, expected) in [
        (ServiceKind::Ssh, LabelTag::BfSsh),
        (ServiceKind::Ftp, LabelTag::BfFtp),
    ] {
        let bf = PhaseSpec::BruteForce {
            service,
            target,
            port: service.default_port(),
            wordlist: Wordlist::generate(7, "bf", 4),
            interval: SimTime::from_secs(4),
        };
        assert_eq!(bf.label(), expected);
    }
}

/// Hub hosting only the attacker, for exercising phases in isolation.
struct SoloHub {
    attacker: AttackerAgent,
}

impl AgentHub for SoloHub {
    fn on_wake(&mut self, _: &mut Net, _: &mut Scheduler<Action>, _: SimTime, _: usize) {}

    fn on_timer(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        _agent: usize,
        token: u64,
    ) {
        self.attacker.on_timer(net, sched, now, token);
    }

    fn on_notice(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        notice: AgentNotice,
    ) {
        self.attacker.on_notice(net, sched, now, notice);
    }

    fn tap_ingress(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        _host: HostId,
        _iface: usize,
        frame: &EthernetFrame,
        prov: Provenance,
    ) -> Tap {
        self.attacker.tap(net, sched, now, frame, prov)
    }
}

fn run_solo(seed: u64, phases: Vec<PlannedPhase>, horizon: SimTime) -> World<SoloHub> {
    let topo = build_reference_topology(&TopologyConfig::default()).unwrap();
    let mut net = Net::new(topo, seed, CapacityConfig::default());
    crate::apps::install_reference_services(&mut net);
    let attacker = net.topo.host_id_by_name("attacker").unwrap();
    let agent = AttackerAgent::new(&mut net, attacker, 0, phases, BTreeMap::new());
    let mut sched = Scheduler::new();
    agent.schedule_plan(&mut sched);
    let mut world = World::new(net, SoloHub { attacker: agent });
    sched.run_until(horizon, &mut world).unwrap();
    world
}

#[test]
fn scan_maps_both_lans() {
    let config = TopologyConfig::default();
    let phases = vec![PlannedPhase {
        start: PhaseStart::At(SimTime::ZERO),
        spec: PhaseSpec::Scan {
            targets: vec![
                ScanTarget {
                    subnet: config.user_subnet,
                    ports: Vec::new(),
                },
                ScanTarget {
                    subnet: config.service_subnet,
                    ports: vec![21, 22, 80],
                },
            ],
            probe_gap: SimTime::from_millis(10),
        },
    }];
    let world = run_solo(7, phases, SimTime::from_secs(30));
    let report = world
        .hub
        .attacker
        .scan_report
        .as_ref()
        .expect("scan must complete within the horizon");

    // ARP sweep of the attacker's own LAN: router + six user hosts,
    // link addresses learned, nothing else known about them.
    let user_ips: Vec<Ipv4Addr> = report
        .hosts
        .keys()
        .filter(|ip| config.user_subnet.contains(**ip))
        .copied()
        .collect();
    let mut expected_user = vec![ip("192.168.132.1")];
    for n in 0..6 {
        expected_user.push(config.user_subnet.host(10 + n));
    }
    expected_user.sort();
    assert_eq!(user_ips, expected_user);
    for addr in &user_ips {
        let host = &report.hosts[addr];
        assert!(host.mac.is_some(), "{addr} swept by ARP must have a MAC");
        assert!(host.open_ports.is_empty());
    }

    // ICMP sweep + SYN probes across the router: exactly the four
    // servers. Pinging the router's far-side address draws a reply
    // sourced from its near-side interface, so the router shows up
    // under its User-LAN address instead.
    let service_ips: Vec<Ipv4Addr> = report
        .hosts
        .keys()
        .filter(|ip| config.service_subnet.contains(**ip))
        .copied()
        .collect();
    assert_eq!(
        service_ips,
        vec![
            ip("192.168.128.10"),
            ip("192.168.128.20"),
            ip("192.168.128.30"),
            ip("192.168.128.31"),
        ]
    );
    assert_eq!(report.open_ports(ip("192.168.128.10")), vec![21]);
    assert_eq!(report.open_ports(ip("192.168.128.20")), vec![80]);
    assert_eq!(report.open_ports(ip("192.168.128.30")), vec![22]);
    assert_eq!(report.open_ports(ip("192.168.128.31")), vec![22]);

    let ftp = &report.hosts[&ip("192.168.128.10")];
    assert_eq!(ftp.open_ports, vec![(21, Some(ServiceKind::Ftp))]);
    assert_eq!(ftp.ttl, Some(63), "one router hop off a Linux TTL");
    assert_eq!(ftp.os, Some(OsGuess::Linux));
    assert_eq!(ftp.closed_ports, 2);

    let win = &report.hosts[&ip("192.168.128.30")];
    assert_eq!(win.ttl, Some(127), "one router hop off a Windows TTL");
    assert_eq!(win.os, Some(OsGuess::Windows));

    let router = &report.hosts[&ip("192.168.132.1")];
    assert_eq!(router.ttl, Some(64), "router answers directly, no hop");
    assert_eq!(router.os, Some(OsGuess::Linux));
    assert!(router.mac.is_some());

    // 253 local ARPs (own address skipped), 254 remote pings, and
    // three SYNs against each of the four responsive servers.
    assert_eq!(report.probes_sent, 253 + 254 + 12);

    // The phase closed itself out and logged its span.
    let phases = &world.net.stats.phases;
    assert_eq!(phases.len(), 1);
    assert_eq!(phases[0].name, "MITM_SCAN");
    assert!(phases[0].emitted >= report.probes_sent);
}
