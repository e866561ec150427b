//! Server-side application sessions: the HTTP store, the FTP server
//! with passive-mode transfers, SSH authentication, and the NTP
//! responder. Each TCP session is a [`ServerApp`] state machine; NTP
//! is a pure request→response function.

use std::net::Ipv4Addr;

use crate::engine::{RngStream, SimTime};
use crate::netmodel::ServiceKind;
use crate::sim::{AppCmd, AppEvent, ConnKey, ListenerKind, Net, ServerApp, SessionSpawn};

/// Fixed internal seed for content generation: bodies depend only on
/// their path or file name, never on the run seed, so two runs serve
/// byte-identical content.
const CONTENT_SEED: u64 = 0x6e69_6473_696d_2121;

/// Unix time the simulation's wall clock starts at (2025-01-01 UTC).
pub const SIM_EPOCH_UNIX: u64 = 1_735_689_600;

/// Seconds between the NTP era (1900) and the Unix epoch (1970).
const NTP_UNIX_OFFSET: u64 = 2_208_988_800;

// ---------------------------------------------------------------------------
// HTTP

/// Product pages run 1..=PRODUCT_COUNT; anything else under /products is 404.
pub const PRODUCT_COUNT: u64 = 20;

/// Every path the store serves with a 200.
pub fn http_catalog() -> Vec<String> {
    let mut paths = vec![
        "/".to_string(),
        "/products".to_string(),
        "/cart".to_string(),
        "/checkout".to_string(),
    ];
    for id in 1..=PRODUCT_COUNT {
        paths.push(format!("/products/{id}"));
    }
    paths
}

fn catalog_serves(path: &str) -> bool {
    match path {
        "/" | "/products" | "/cart" | "/checkout" => true,
        _ => match path.strip_prefix("/products/") {
            Some(id) => id
                .parse::<u64>()
                .is_ok_and(|n| (1..=PRODUCT_COUNT).contains(&n)),
            None => false,
        },
    }
}

/// Deterministic page body for a path: pseudo-random printable bytes,
/// 512–8192 of them, fixed by the path alone.
pub fn http_body(path: &str) -> Vec<u8> {
    let mut rng = RngStream::new(CONTENT_SEED, &format!("http-body:{path}"));
    let len = rng.draw_range(512, 8193) as usize;
    let mut body = vec![0u8; len];
    rng.fill_bytes(&mut body);
    for b in &mut body {
        // Map into the printable ASCII range so dumps stay readable.
        *b = b' ' + (*b % 95);
    }
    body
}

const HTTP_404_BODY: &[u8] = b"<html><body><h1>404 Not Found</h1></body></html>\n";

pub fn http_response(path: &str) -> Vec<u8> {
    let (status, body) = if catalog_serves(path) {
        ("200 OK", http_body(path))
    } else {
        ("404 Not Found", HTTP_404_BODY.to_vec())
    };
    let mut response = format!(
        "HTTP/1.1 {status}\r\nServer: storefront/1.0\r\nContent-Type: text/html\r\nContent-Length: {}\r\nConnection: close\r\n\r\n",
        body.len()
    )
    .into_bytes();
    response.extend_from_slice(&body);
    response
}

/// One HTTP connection: read a request, send the response, then wait
/// for the client to close.
pub struct HttpSession {
    buffer: Vec<u8>,
    answered: bool,
}

impl HttpSession {
    pub fn new() -> HttpSession {
        HttpSession {
            buffer: Vec::new(),
            answered: false,
        }
    }
}

impl Default for HttpSession {
    fn default() -> Self {
        Self::new()
    }
}

impl ServerApp for HttpSession {
    fn step(&mut self, event: AppEvent) -> Vec<AppCmd> {
        match event {
            AppEvent::Data(bytes) if !self.answered => {
                self.buffer.extend_from_slice(&bytes);
                let Some(head_end) = find_subslice(&self.buffer, b"\r\n\r\n") else {
                    return Vec::new();
                };
                self.answered = true;
                let head = String::from_utf8_lossy(&self.buffer[..head_end]);
                let path = head
                    .lines()
                    .next()
                    .and_then(|line| {
                        let mut parts = line.split(' ');
                        match (parts.next(), parts.next()) {
                            (Some("GET"), Some(path)) => Some(path.to_string()),
                            _ => None,
                        }
                    })
                    .unwrap_or_default();
                let bytes = if path.is_empty() {
                    b"HTTP/1.1 400 Bad Request\r\nContent-Length: 0\r\nConnection: close\r\n\r\n"
                        .to_vec()
                } else {
                    http_response(&path)
                };
                vec![AppCmd::Send { bytes, push: true }]
            }
            AppEvent::PeerClosed => vec![AppCmd::Close],
            _ => Vec::new(),
        }
    }
}

fn find_subslice(haystack: &[u8], needle: &[u8]) -> Option<usize> {
    haystack
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|i| i + needle.len())
}

// ---------------------------------------------------------------------------
// FTP

/// The fixed remote directory every session sees.
pub fn ftp_files() -> Vec<(&'static str, usize)> {
    vec![
        ("readme.txt", 1833),
        ("quarterly-report.pdf", 7424),
        ("inventory.csv", 3210),
        ("backup-notes.txt", 954),
        ("firmware.bin", 15872),
    ]
}

/// Deterministic file content, fixed by name alone.
pub fn ftp_file_body(name: &str) -> Vec<u8> {
    let size = ftp_files()
        .iter()
        .find(|(n, _)| *n == name)
        .map(|(_, s)| *s)
        .unwrap_or(0);
    let mut rng = RngStream::new(CONTENT_SEED, &format!("ftp-file:{name}"));
    let mut body = vec![0u8; size];
    rng.fill_bytes(&mut body);
    body
}

pub fn ftp_listing() -> Vec<u8> {
    let mut out = String::new();
    for (name, size) in ftp_files() {
        out.push_str(&format!(
            "-rw-r--r--   1 ftp      ftp      {size:>8} Jan 01 00:00 {name}\r\n"
        ));
    }
    out.into_bytes()
}

#[derive(Debug, PartialEq, Eq)]
enum FtpState {
    WaitUser,
    WaitPass { user: String },
    LoggedIn,
    /// PASV answered; waiting for the data command (LIST/RETR).
    PasvOpen { port: u16 },
    Quitting,
}

/// FTP control-channel session.
pub struct FtpCtrlSession {
    state: FtpState,
    local_ip: Ipv4Addr,
    credentials: Option<(String, String)>,
    buffer: Vec<u8>,
}

impl FtpCtrlSession {
    pub fn new(local_ip: Ipv4Addr, credentials: Option<(String, String)>) -> FtpCtrlSession {
        FtpCtrlSession {
            state: FtpState::WaitUser,
            local_ip,
            credentials,
            buffer: Vec::new(),
        }
    }

    fn reply(text: &str) -> AppCmd {
        AppCmd::Send {
            bytes: format!("{text}\r\n").into_bytes(),
            push: true,
        }
    }

    fn handle_line(&mut self, line: &str) -> Vec<AppCmd> {
        let (verb, arg) = match line.split_once(' ') {
            Some((v, a)) => (v.to_ascii_uppercase(), a.trim().to_string()),
            None => (line.trim().to_ascii_uppercase(), String::new()),
        };
        match (&self.state, verb.as_str()) {
            (FtpState::WaitUser, "USER") => {
                self.state = FtpState::WaitPass { user: arg };
                vec![Self::reply("331 Password required")]
            }
            (FtpState::WaitPass { user }, "PASS") => {
                let ok = self
                    .credentials
                    .as_ref()
                    .is_some_and(|(u, p)| u == user && *p == arg);
                if ok {
                    self.state = FtpState::LoggedIn;
                    vec![Self::reply("230 Login successful")]
                } else {
                    self.state = FtpState::WaitUser;
                    vec![Self::reply("530 Login incorrect"), AppCmd::Close]
                }
            }
            (FtpState::LoggedIn, "SYST") => vec![Self::reply("215 UNIX Type: L8")],
            (FtpState::LoggedIn, "PWD") => vec![Self::reply("257 \"/\" is the current directory")],
            (FtpState::LoggedIn, "PASV") => vec![AppCmd::OpenPassive],
            (FtpState::PasvOpen { port }, "LIST") => {
                let port = *port;
                self.state = FtpState::LoggedIn;
                vec![
                    AppCmd::ArmPassive {
                        port,
                        payload: ftp_listing(),
                    },
                    Self::reply("150 Here comes the directory listing"),
                ]
            }
            (FtpState::PasvOpen { port }, "RETR") => {
                let port = *port;
                self.state = FtpState::LoggedIn;
                let body = ftp_file_body(&arg);
                if body.is_empty() {
                    vec![Self::reply("550 Failed to open file")]
                } else {
                    vec![
                        AppCmd::ArmPassive {
                            port,
                            payload: body,
                        },
                        Self::reply("150 Opening BINARY mode data connection"),
                    ]
                }
            }
            (_, "QUIT") => {
                self.state = FtpState::Quitting;
                vec![Self::reply("221 Goodbye"), AppCmd::Close]
            }
            _ => vec![Self::reply("500 Unknown command")],
        }
    }
}

impl ServerApp for FtpCtrlSession {
    fn step(&mut self, event: AppEvent) -> Vec<AppCmd> {
        match event {
            AppEvent::Connected => vec![Self::reply("220 ftpd ready")],
            AppEvent::Data(bytes) => {
                self.buffer.extend_from_slice(&bytes);
                let mut cmds = Vec::new();
                while let Some(pos) = self.buffer.iter().position(|&b| b == b'\n') {
                    let line: Vec<u8> = self.buffer.drain(..=pos).collect();
                    let line = String::from_utf8_lossy(&line).trim_end().to_string();
                    if !line.is_empty() {
                        cmds.extend(self.handle_line(&line));
                    }
                }
                cmds
            }
            AppEvent::PasvPort(port) => {
                self.state = FtpState::PasvOpen { port };
                let o = self.local_ip.octets();
                vec![Self::reply(&format!(
                    "227 Entering Passive Mode ({},{},{},{},{},{})",
                    o[0],
                    o[1],
                    o[2],
                    o[3],
                    port >> 8,
                    port & 0xff
                ))]
            }
            AppEvent::PeerClosed => vec![AppCmd::Close],
            _ => Vec::new(),
        }
    }
}

/// FTP passive-mode data session: pour the armed payload, close, and
/// report completion on the control channel once fully torn down.
pub struct FtpDataSession {
    ctrl: ConnKey,
    payload: Vec<u8>,
    reported: bool,
}

impl FtpDataSession {
    pub fn new(ctrl: ConnKey, payload: Vec<u8>) -> FtpDataSession {
        FtpDataSession {
            ctrl,
            payload,
            reported: false,
        }
    }
}

impl ServerApp for FtpDataSession {
    fn step(&mut self, event: AppEvent) -> Vec<AppCmd> {
        match event {
            // The whole transfer is queued at accept; the 226 goes out
            // on the control channel as soon as the data-side close is
            // initiated, as real servers do — not when the close
            // handshake finishes (the active closer lingers in
            // TIME_WAIT long after the bytes arrived).
            AppEvent::Connected if !self.reported => {
                self.reported = true;
                vec![
                    AppCmd::Send {
                        bytes: std::mem::take(&mut self.payload),
                        push: true,
                    },
                    AppCmd::Close,
                    AppCmd::SendOther {
                        key: self.ctrl,
                        bytes: b"226 Transfer complete\r\n".to_vec(),
                        push: true,
                    },
                ]
            }
            _ => Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// SSH

pub const SSH_SERVER_BANNER: &str = "SSH-2.0-simssh_1.0";
pub const SSH_CLIENT_BANNER: &str = "SSH-2.0-simssh-client_1.0";

/// SSH session: banner exchange then a single auth attempt. No real
/// cryptography — the credential is an opaque token pair in the clear,
/// which keeps success and failure distinguishable on the wire.
pub struct SshSession {
    credentials: Option<(String, String)>,
    buffer: Vec<u8>,
    banner_seen: bool,
    decided: bool,
}

impl SshSession {
    pub fn new(credentials: Option<(String, String)>) -> SshSession {
        SshSession {
            credentials,
            buffer: Vec::new(),
            banner_seen: false,
            decided: false,
        }
    }
}

impl ServerApp for SshSession {
    fn step(&mut self, event: AppEvent) -> Vec<AppCmd> {
        match event {
            AppEvent::Connected => vec![AppCmd::Send {
                bytes: format!("{SSH_SERVER_BANNER}\r\n").into_bytes(),
                push: true,
            }],
            AppEvent::Data(bytes) => {
                self.buffer.extend_from_slice(&bytes);
                let mut cmds = Vec::new();
                while let Some(pos) = self.buffer.iter().position(|&b| b == b'\n') {
                    if self.decided {
                        break;
                    }
                    let line: Vec<u8> = self.buffer.drain(..=pos).collect();
                    let line = String::from_utf8_lossy(&line).trim_end().to_string();
                    if !self.banner_seen {
                        // First line must be the client banner; anything
                        // else is protocol junk worth hanging up on.
                        if line.starts_with("SSH-2.0-") {
                            self.banner_seen = true;
                        } else {
                            self.decided = true;
                            cmds.push(AppCmd::Close);
                        }
                        continue;
                    }
                    if let Some(rest) = line.strip_prefix("AUTH ") {
                        self.decided = true;
                        let ok = match rest.split_once(' ') {
                            Some((user, token)) => self
                                .credentials
                                .as_ref()
                                .is_some_and(|(u, p)| u == user && p == token),
                            None => false,
                        };
                        if ok {
                            cmds.push(AppCmd::Send {
                                bytes: b"AUTH-OK session-granted\r\n".to_vec(),
                                push: true,
                            });
                        } else {
                            cmds.push(AppCmd::Send {
                                bytes: b"AUTH-FAIL access-denied\r\n".to_vec(),
                                push: true,
                            });
                            cmds.push(AppCmd::Close);
                        }
                    }
                }
                cmds
            }
            AppEvent::PeerClosed => vec![AppCmd::Close],
            _ => Vec::new(),
        }
    }
}

// ---------------------------------------------------------------------------
// NTP

/// NTP 64-bit timestamp (seconds since 1900 + binary fraction) for a
/// simulation instant.
pub fn ntp_timestamp(now: SimTime) -> u64 {
    let secs = SIM_EPOCH_UNIX + now.as_secs() + NTP_UNIX_OFFSET;
    let frac_ns = now.as_nanos() % 1_000_000_000;
    let frac = ((frac_ns as u128) << 32) / 1_000_000_000;
    (secs << 32) | frac as u64
}

/// Client mode-3 request, 48 bytes, transmit timestamp only.
pub fn ntp_request(now: SimTime) -> Vec<u8> {
    let mut packet = vec![0u8; 48];
    packet[0] = 0x23; // LI=0, VN=4, mode=3 (client)
    packet[40..48].copy_from_slice(&ntp_timestamp(now).to_be_bytes());
    packet
}

/// Server mode-4 response, if the request parses as a mode-3 packet.
pub fn ntp_response(request: &[u8], now: SimTime) -> Option<Vec<u8>> {
    if request.len() != 48 || request[0] & 0x07 != 3 {
        return None;
    }
    let mut packet = vec![0u8; 48];
    packet[0] = 0x24; // LI=0, VN=4, mode=4 (server)
    packet[1] = 2; // stratum 2
    packet[2] = 6; // poll
    packet[3] = 0xec; // precision 2^-20
    packet[12..16].copy_from_slice(b"SIM\0"); // reference id
    let now_ts = ntp_timestamp(now).to_be_bytes();
    packet[16..24].copy_from_slice(&now_ts); // reference timestamp
    packet[24..32].copy_from_slice(&request[40..48]); // originate = client transmit
    packet[32..40].copy_from_slice(&now_ts); // receive timestamp
    packet[40..48].copy_from_slice(&now_ts); // transmit timestamp
    Some(packet)
}

// ---------------------------------------------------------------------------
// Wiring

/// Installs the reference session factory and UDP responder on a
/// network: HTTP/FTP/SSH sessions by service kind, FTP data sessions
/// for passive listeners, NTP over UDP.
pub fn install_reference_services(net: &mut Net) {
    net.set_session_factory(Box::new(|spawn: SessionSpawn<'_>| match spawn.kind {
        ListenerKind::Service(ServiceKind::Http) => Box::new(HttpSession::new()),
        ListenerKind::Service(ServiceKind::Ftp) => Box::new(FtpCtrlSession::new(
            spawn.local.ip,
            spawn.credentials.cloned(),
        )),
        ListenerKind::Service(ServiceKind::Ssh) => {
            Box::new(SshSession::new(spawn.credentials.cloned()))
        }
        ListenerKind::Service(ServiceKind::Ntp) => {
            unreachable!("NTP is UDP-only; no TCP listener is ever opened for it")
        }
        ListenerKind::FtpData { ctrl, payload } => {
            Box::new(FtpDataSession::new(*ctrl, payload.clone()))
        }
    }));
    net.set_udp_service(Box::new(|kind, request, now| match kind {
        ServiceKind::Ntp => ntp_response(request, now),
        _ => None,
    }));
    net.open_service_listeners();
}
