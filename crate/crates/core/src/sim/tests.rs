use std::collections::BTreeSet;
use std::net::Ipv4Addr;

use super::*;
use crate::netmodel::{build_reference_topology, MacAddress, TopologyConfig};
use crate::protocols::{encode_frame, TcpFlags, TcpState};

fn test_net(seed: u64) -> Net {
    let topo = build_reference_topology(&TopologyConfig::default()).unwrap();
    let mut net = Net::new(topo, seed, CapacityConfig::default());
    net.open_service_listeners();
    net.attach_capture(crate::netmodel::SwitchId(0)).unwrap();
    net
}

fn host(net: &Net, name: &str) -> HostId {
    net.topo.host_id_by_name(name).unwrap()
}

fn ip(s: &str) -> Ipv4Addr {
    s.parse().unwrap()
}

/// Echo server session: greets, repeats every byte, follows closes.
struct EchoSession;

impl ServerApp for EchoSession {
    fn step(&mut self, event: AppEvent) -> Vec<AppCmd> {
        match event {
            AppEvent::Connected => vec![AppCmd::Send {
                bytes: b"hi\n".to_vec(),
                push: true,
            }],
            AppEvent::Data(bytes) => vec![AppCmd::Send { bytes, push: true }],
            AppEvent::PeerClosed => vec![AppCmd::Close],
            _ => Vec::new(),
        }
    }
}

fn install_echo_factory(net: &mut Net) {
    net.set_session_factory(Box::new(|_spawn| Box::new(EchoSession)));
}

/// What a scripted client lane should do as its connection progresses.
#[derive(Clone)]
enum ClientScript {
    /// Send these bytes once connected, close after this many reply bytes.
    SendThenClose { payload: Vec<u8>, expect: usize },
}

#[derive(Default)]
struct TestHub {
    notices: Vec<AgentNotice>,
    scripts: Vec<(HostId, ConnKey, ClientScript)>,
    received: Vec<(usize, Vec<u8>)>,
    /// Ping to fire on the next wake: (source host, destination).
    wake_ping: Option<(HostId, Ipv4Addr)>,
}

impl TestHub {
    fn script_for(&self, key: &ConnKey) -> Option<(HostId, ClientScript)> {
        self.scripts
            .iter()
            .find(|(_, k, _)| k == key)
            .map(|(h, _, s)| (*h, s.clone()))
    }

    fn ping_replies(&self) -> usize {
        self.notices
            .iter()
            .filter(|n| matches!(n, AgentNotice::PingReply { .. }))
            .count()
    }

    fn conn_events(&self, want: fn(&TcpEvent) -> bool) -> usize {
        self.notices
            .iter()
            .filter(|n| matches!(n, AgentNotice::Conn { event, .. } if want(event)))
            .count()
    }
}

impl AgentHub for TestHub {
    fn on_wake(&mut self, net: &mut Net, sched: &mut Scheduler<Action>, _: SimTime, agent: usize) {
        if let Some((host, dst)) = self.wake_ping.take() {
            let prov = net.stack_prov(host);
            net.send_ping(sched, host, dst, agent, 9, 1, prov);
        }
    }

    fn on_timer(&mut self, _: &mut Net, _: &mut Scheduler<Action>, _: SimTime, _: usize, _: u64) {}

    fn on_notice(
        &mut self,
        net: &mut Net,
        sched: &mut Scheduler<Action>,
        now: SimTime,
        notice: AgentNotice,
    ) {
        if let AgentNotice::Conn { agent, key, event, .. } = &notice {
            if let Some((host, script)) = self.script_for(key) {
                match (&script, event) {
                    (ClientScript::SendThenClose { payload, .. }, TcpEvent::Connected) => {
                        net.conn_send(sched, now, host, *key, payload, true);
                    }
                    (ClientScript::SendThenClose { expect, .. }, TcpEvent::Data(bytes)) => {
                        self.received.push((*agent, bytes.clone()));
                        let total: usize = self
                            .received
                            .iter()
                            .filter(|(a, _)| a == agent)
                            .map(|(_, b)| b.len())
                            .sum();
                        if total >= *expect {
                            net.conn_close(sched, now, host, *key);
                        }
                    }
                    _ => {}
                }
            }
        }
        self.notices.push(notice);
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

fn run(world: &mut World<TestHub>, sched: &mut Scheduler<Action>, until: SimTime) {
    sched.run_until(until, world).unwrap();
}

#[test]
fn ping_crosses_the_router_and_comes_back() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let mut sched = Scheduler::new();
    let prov = net.stack_prov(user);
    net.send_ping(&mut sched, user, ip("192.168.128.20"), 9, 1, 7, prov);
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(5));
    assert_eq!(world.hub.ping_replies(), 1);
    assert!(matches!(
        world.hub.notices[0],
        AgentNotice::PingReply { agent: 9, seq: 7, from } if from == ip("192.168.128.20")
    ));
    // Router crossed both ways, one hop each.
    assert_eq!(world.net.stats.counters.routed_in, 2);
    assert_eq!(world.net.stats.counters.routed_out, 2);
}

#[test]
fn span_mirrors_exactly_the_service_lan_frames() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let mut sched = Scheduler::new();
    let prov = net.stack_prov(user);
    net.send_ping(&mut sched, user, ip("192.168.128.20"), 9, 1, 7, prov);
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(5));
    // On the service switch: the router's ARP request (flooded), the web
    // server's reply, the echo request, and the echo reply. The user-LAN
    // ARP exchange never reaches the mirror.
    assert_eq!(world.net.capture.len(), 4);
    let records = world.net.capture.collect_records();
    assert!(records.iter().all(|r| r.label == LabelTag::Benign));
    let mut last = SimTime::ZERO;
    for record in &records {
        assert!(record.timestamp >= last, "capture timestamps must not regress");
        last = record.timestamp;
    }
}

#[test]
fn expired_ttl_draws_time_exceeded_from_the_router() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let router = net.topo.router;
    let mut sched = Scheduler::new();
    let echo = IcmpMessage::echo_request(1, 1, vec![0; 8]);
    let packet = Ipv4Packet::new(ip("192.168.132.10"), ip("192.168.128.20"), 1, 1, IpPayload::Icmp(echo));
    let router_iface = net
        .topo
        .host(router)
        .interfaces
        .iter()
        .position(|i| i.subnet.contains(ip("192.168.132.10")))
        .unwrap();
    let frame = EthernetFrame {
        dst: net.topo.host(router).interfaces[router_iface].mac,
        src: net.topo.host(user).interfaces[0].mac,
        payload: EtherPayload::Ipv4(packet),
    };
    let prov = net.stack_prov(user);
    sched
        .schedule(
            SimTime::ZERO,
            Action::HostIngress {
                host: router,
                iface: router_iface,
                frame,
                prov,
            },
        )
        .unwrap();
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(5));
    assert_eq!(world.net.stats.counters.ttl_drops, 1);
    assert_eq!(world.net.stats.counters.icmp_errors_received, 1);
    assert_eq!(world.net.stats.counters.routed_out, 0);
}

#[test]
fn unroutable_destination_draws_unreachable() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let mut sched = Scheduler::new();
    let prov = net.stack_prov(user);
    net.send_ping(&mut sched, user, ip("10.9.9.9"), 3, 1, 1, prov);
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(5));
    assert_eq!(world.net.stats.counters.no_route, 1);
    assert_eq!(world.net.stats.counters.icmp_errors_received, 1);
    assert_eq!(world.hub.ping_replies(), 0);
}

#[test]
fn unanswered_arp_gives_up_after_one_retry() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let mut sched = Scheduler::new();
    let prov = net.stack_prov(user);
    // In-subnet address nobody owns: resolution can never succeed.
    net.send_ping(&mut sched, user, ip("192.168.132.200"), 3, 1, 1, prov);
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(10));
    assert_eq!(world.net.stats.counters.arp_requests, 2);
    assert_eq!(world.net.stats.counters.arp_failures, 1);
}

#[test]
fn syn_to_a_closed_port_fails_the_connect() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let attacker_id = net.register_agent("lane");
    let mut sched = Scheduler::new();
    net.client_connect(
        &mut sched,
        SimTime::ZERO,
        user,
        Endpoint::new(ip("192.168.128.20"), 9999),
        5,
        attacker_id,
        LabelTag::Benign,
    );
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(5));
    assert_eq!(world.net.stats.counters.rst_for_unknown, 1);
    assert_eq!(
        world.hub.conn_events(|e| matches!(e, TcpEvent::ConnectFailed)),
        1
    );
    assert_eq!(world.net.conn_count(host(&world.net, "user-00")), 0);
}

#[test]
fn tcp_exchange_completes_through_the_router() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-03");
    let web = host(&net, "web");
    let lane = net.register_agent("lane");
    let mut sched = Scheduler::new();
    let key = net.client_connect(
        &mut sched,
        SimTime::ZERO,
        user,
        Endpoint::new(ip("192.168.128.20"), 80),
        5,
        lane,
        LabelTag::Benign,
    );
    let mut hub = TestHub::default();
    hub.scripts.push((
        user,
        key,
        ClientScript::SendThenClose {
            payload: b"ping!".to_vec(),
            expect: 8, // greeting (3) + echo (5)
        },
    ));
    let mut world = World::new(net, hub);
    // Long enough for the client's TIME_WAIT to expire.
    run(&mut world, &mut sched, SimTime::from_secs(60));
    let bytes: Vec<u8> = world
        .hub
        .received
        .iter()
        .flat_map(|(_, b)| b.clone())
        .collect();
    assert_eq!(bytes, b"hi\nping!");
    assert_eq!(
        world.hub.conn_events(|e| matches!(e, TcpEvent::Connected)),
        1
    );
    // Both ends fully torn down: client saw Closed, server map emptied.
    assert_eq!(world.hub.conn_events(|e| matches!(e, TcpEvent::Closed)), 1);
    assert_eq!(world.net.conn_count(web), 0);
    assert_eq!(world.net.conn_count(user), 0);
}

#[test]
fn established_backlog_limit_sheds_excess_syns() {
    // A bucket wide enough that only the listener backlog limits bind.
    let capacity = CapacityConfig {
        ingress_pps: 1_000_000,
        ingress_burst: 1_000_000,
        ..CapacityConfig::default()
    };
    let topo = build_reference_topology(&TopologyConfig::default()).unwrap();
    let mut net = Net::new(topo, 1, capacity);
    net.open_service_listeners();
    net.attach_capture(crate::netmodel::SwitchId(0)).unwrap();
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let web = host(&net, "web");
    let lane = net.register_agent("lane");
    let mut sched = Scheduler::new();
    for _ in 0..70 {
        net.client_connect(
            &mut sched,
            SimTime::ZERO,
            user,
            Endpoint::new(ip("192.168.128.20"), 80),
            5,
            lane,
            LabelTag::Benign,
        );
    }
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(30));
    assert_eq!(world.net.conn_count(web), 64);
    assert_eq!(
        world.hub.conn_events(|e| matches!(e, TcpEvent::Connected)),
        64
    );
    assert_eq!(
        world.hub.conn_events(|e| matches!(e, TcpEvent::ConnectFailed)),
        6
    );
    // Every initial SYN beyond the limit plus its two retransmits.
    assert_eq!(world.net.stats.counters.backlog_drops, 18);
}

#[test]
fn ingress_budget_sheds_a_same_instant_burst() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let web = host(&net, "web");
    let web_mac = net.topo.host(web).interfaces[0].mac;
    let mut sched = Scheduler::new();
    let prov = net.stack_prov(web);
    for _ in 0..200 {
        let frame = EthernetFrame {
            dst: web_mac,
            src: MacAddress([0x02, 0, 0, 0, 0, 0x99]),
            payload: EtherPayload::Other {
                ethertype: 0x9999,
                bytes: vec![0; 46],
            },
        };
        sched
            .schedule(
                SimTime::ZERO,
                Action::HostIngress {
                    host: web,
                    iface: 0,
                    frame,
                    prov,
                },
            )
            .unwrap();
    }
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(1));
    // Burst allowance admits the first hundred; the rest are shed.
    assert_eq!(world.net.stats.counters.bucket_drops, 100);
    assert_eq!(world.net.stats.counters.l2_ignored, 100);
}

#[test]
fn routers_and_the_attacker_bypass_the_ingress_budget() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let router = net.topo.router;
    let attacker = net.attacker_host().unwrap();
    let mut sched = Scheduler::new();
    for target in [router, attacker] {
        let mac = net.topo.host(target).interfaces[0].mac;
        let prov = net.stack_prov(target);
        for _ in 0..500 {
            let frame = EthernetFrame {
                dst: mac,
                src: MacAddress([0x02, 0, 0, 0, 0, 0x99]),
                payload: EtherPayload::Other {
                    ethertype: 0x9999,
                    bytes: vec![0; 46],
                },
            };
            sched
                .schedule(
                    SimTime::ZERO,
                    Action::HostIngress {
                        host: target,
                        iface: 0,
                        frame,
                        prov,
                    },
                )
                .unwrap();
        }
    }
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(1));
    assert_eq!(world.net.stats.counters.bucket_drops, 0);
}

#[test]
fn forged_arp_reply_diverts_the_victim_traffic() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let attacker = net.attacker_host().unwrap();
    let attacker_mac = net.topo.host(attacker).interfaces[0].mac;
    let user_mac = net.topo.host(user).interfaces[0].mac;
    let router_user_ip = ip("192.168.132.1");
    let mut sched = Scheduler::new();

    // The attacker claims the router's address in the victim's cache.
    let forged = ArpMessage::is_at(attacker_mac, router_user_ip, user_mac, ip("192.168.132.10"));
    let frame = EthernetFrame {
        dst: user_mac,
        src: attacker_mac,
        payload: EtherPayload::Arp(forged),
    };
    let prov = Provenance {
        agent: AgentId(attacker.0 as u32),
        label: LabelTag::MitmArp,
        relayed: false,
    };
    net.emit_frame(&mut sched, attacker, 0, frame, prov);
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(1));

    // Victim now "knows" the router at the attacker's MAC…
    assert_eq!(
        world.net.topo.host(user).arp_table.lookup(router_user_ip),
        Some(attacker_mac)
    );

    // …so its next cross-subnet ping lands on the attacker instead.
    let prov = world.net.stack_prov(user);
    world
        .net
        .send_ping(&mut sched, user, ip("192.168.128.20"), 9, 1, 1, prov);
    run(&mut world, &mut sched, SimTime::from_secs(5));
    assert_eq!(world.net.stats.counters.misdelivered, 1);
    assert_eq!(world.hub.ping_replies(), 0);
    assert_eq!(world.net.stats.counters.routed_in, 0);
}

#[test]
fn same_instant_rebind_wins_before_queued_packets_flush() {
    // A forged reply landing in the same instant as the genuine one —
    // but after it — must take effect before packets queued on the
    // resolution drain: the whole poisoning race hinges on this.
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let attacker = net.attacker_host().unwrap();
    let attacker_mac = net.topo.host(attacker).interfaces[0].mac;
    let user_mac = net.topo.host(user).interfaces[0].mac;
    let router_user_ip = ip("192.168.132.1");
    let router_mac = net.topo.host(net.topo.router).interfaces[1].mac;
    let mut sched = Scheduler::new();

    // The victim's ping goes out at 900µs and queues on ARP resolution.
    sched
        .schedule(SimTime::from_micros(900), Action::AgentWake { agent: 0 })
        .unwrap();
    // Genuine binding arrives first in the 1ms instant…
    let genuine = ArpMessage::is_at(router_mac, router_user_ip, user_mac, ip("192.168.132.10"));
    sched
        .schedule(
            SimTime::from_millis(1),
            Action::HostIngress {
                host: user,
                iface: 0,
                frame: EthernetFrame {
                    dst: user_mac,
                    src: router_mac,
                    payload: EtherPayload::Arp(genuine),
                },
                prov: Provenance {
                    agent: AgentId(net.topo.router.0 as u32),
                    label: LabelTag::Benign,
                    relayed: false,
                },
            },
        )
        .unwrap();
    // …and the forgery lands later in that same instant.
    let forged = ArpMessage::is_at(attacker_mac, router_user_ip, user_mac, ip("192.168.132.10"));
    sched
        .schedule(
            SimTime::from_millis(1),
            Action::HostIngress {
                host: user,
                iface: 0,
                frame: EthernetFrame {
                    dst: user_mac,
                    src: attacker_mac,
                    payload: EtherPayload::Arp(forged),
                },
                prov: Provenance {
                    agent: AgentId(attacker.0 as u32),
                    label: LabelTag::MitmArp,
                    relayed: false,
                },
            },
        )
        .unwrap();
    let mut hub = TestHub::default();
    hub.wake_ping = Some((user, ip("192.168.128.20")));
    let mut world = World::new(net, hub);
    run(&mut world, &mut sched, SimTime::from_secs(5));

    // The queued echo request went to the attacker's MAC, not the
    // router's: no routing ever happened.
    assert_eq!(world.net.stats.counters.misdelivered, 1);
    assert_eq!(world.net.stats.counters.routed_in, 0);
    assert_eq!(world.hub.ping_replies(), 0);
}

#[test]
fn tap_consumes_frames_before_the_stack_sees_them() {
    struct ConsumeAll {
        seen: usize,
    }
    impl AgentHub for ConsumeAll {
        fn on_wake(&mut self, _: &mut Net, _: &mut Scheduler<Action>, _: SimTime, _: usize) {}
        fn on_timer(
            &mut self,
            _: &mut Net,
            _: &mut Scheduler<Action>,
            _: SimTime,
            _: usize,
            _: u64,
        ) {
        }
        fn on_notice(&mut self, _: &mut Net, _: &mut Scheduler<Action>, _: SimTime, _: AgentNotice) {}
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
            self.seen += 1;
            Tap::Consumed
        }
    }

    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let attacker = net.attacker_host().unwrap();
    net.tap_hosts.insert(attacker);
    let user = host(&net, "user-00");
    let attacker_ip = ip("192.168.132.66");
    let mut sched = Scheduler::new();
    let prov = net.stack_prov(user);
    // Ping the attacker directly: the tap swallows the echo request, so
    // no reply ever comes back.
    net.send_ping(&mut sched, user, attacker_ip, 9, 1, 1, prov);
    let mut world = World::new(net, ConsumeAll { seen: 0 });
    sched.run_until(SimTime::from_secs(5), &mut world).unwrap();
    assert!(world.hub.seen >= 1);
    assert_eq!(world.net.stats.counters.echo_requests, 0);
}

#[test]
fn capture_frames_decode_back_to_what_was_sent() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let mut sched = Scheduler::new();
    let prov = net.stack_prov(user);
    net.send_ping(&mut sched, user, ip("192.168.128.20"), 9, 1, 7, prov);
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(5));
    let records = world.net.capture.collect_records();
    assert!(!records.is_empty());
    for record in &records {
        let decoded = crate::protocols::decode_frame(&record.bytes).unwrap();
        assert!(decoded.checksums_ok, "mirrored frame failed checksums");
        assert_eq!(encode_frame(&decoded.frame), record.bytes);
    }
}

#[test]
fn mitm_audit_counts_victim_router_traffic() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let victims: BTreeSet<Ipv4Addr> = [ip("192.168.132.10")].into();
    net.arm_mitm_audit(victims, SimTime::ZERO);
    let mut sched = Scheduler::new();
    let prov = net.stack_prov(user);
    net.send_ping(&mut sched, user, ip("192.168.128.20"), 9, 1, 7, prov);
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(5));
    let audit = world.net.stats.mitm_audit.as_ref().unwrap();
    // Outbound echo request at the router, inbound echo reply at the
    // victim: two pair packets, none relayed.
    assert_eq!(audit.pair_packets, 2);
    assert_eq!(audit.relayed_packets, 0);
    assert_eq!(audit.diversion_ratio(), 0.0);
}

#[test]
fn rst_flag_check_matches_segment_shapes() {
    // A plain ACK to a port with no connection draws a RST without ACK;
    // the sim counts it but the victim silently drops it.
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-00");
    let web_ip = ip("192.168.128.20");
    let mut sched = Scheduler::new();
    let segment = TcpSegment {
        src_port: 50000,
        dst_port: 60000,
        seq: 1000,
        ack: 0,
        flags: TcpFlags::ACK,
        window: 65535,
        checksum: 0,
        payload: Vec::new(),
    };
    let prov = net.stack_prov(user);
    net.send_ip_routed(&mut sched, user, web_ip, IpPayload::Tcp(segment), prov);
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_secs(5));
    assert_eq!(world.net.stats.counters.rst_for_unknown, 2);
    // First at the web host (no listener on 60000), then at the sender,
    // which no longer has the connection either — but RSTs are never
    // answered, so the exchange stops there.
}

#[test]
fn server_conns_finish_in_known_states() {
    let mut net = test_net(1);
    install_echo_factory(&mut net);
    let user = host(&net, "user-03");
    let lane = net.register_agent("lane");
    let mut sched = Scheduler::new();
    let key = net.client_connect(
        &mut sched,
        SimTime::ZERO,
        user,
        Endpoint::new(ip("192.168.128.20"), 80),
        5,
        lane,
        LabelTag::Benign,
    );
    let mut world = World::new(net, TestHub::default());
    run(&mut world, &mut sched, SimTime::from_millis(50));
    assert_eq!(world.net.conn_state(user, &key), Some(TcpState::Established));
}

