//! SPAN-side capture: an ordered log of mirrored frames with
//! ground-truth provenance, writable as classic pcap plus a label
//! sidecar CSV.

use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Seek, SeekFrom, Write};
use std::path::Path;
use std::str::FromStr;

use crate::engine::SimTime;

/// Identifies the agent whose action put a frame on the wire. The
/// numeric id indexes a per-run name registry; the names appear in the
/// label CSV.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct AgentId(pub u32);

/// Ground-truth class of a captured frame. Everything the attacker
/// emits or relays carries its attack-phase tag; all other traffic —
/// including victims' responses to attack frames — is benign.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize)]
pub enum LabelTag {
    Benign,
    MitmScan,
    MitmArp,
    DosPshAck,
    DosIcmpIgmp,
    DosTcpKill,
    BfSsh,
    BfFtp,
}

impl LabelTag {
    pub const ALL: [LabelTag; 8] = [
        LabelTag::Benign,
        LabelTag::MitmScan,
        LabelTag::MitmArp,
        LabelTag::DosPshAck,
        LabelTag::DosIcmpIgmp,
        LabelTag::DosTcpKill,
        LabelTag::BfSsh,
        LabelTag::BfFtp,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            LabelTag::Benign => "BENIGN",
            LabelTag::MitmScan => "MITM_SCAN",
            LabelTag::MitmArp => "MITM_ARP",
            LabelTag::DosPshAck => "DOS_PSHACK",
            LabelTag::DosIcmpIgmp => "DOS_ICMPIGMP",
            LabelTag::DosTcpKill => "DOS_TCPKILL",
            LabelTag::BfSsh => "BF_SSH",
            LabelTag::BfFtp => "BF_FTP",
        }
    }

    pub fn is_benign(self) -> bool {
        self == LabelTag::Benign
    }

    fn to_byte(self) -> u8 {
        LabelTag::ALL.iter().position(|&l| l == self).unwrap() as u8
    }

    fn from_byte(b: u8) -> Option<LabelTag> {
        LabelTag::ALL.get(b as usize).copied()
    }
}

impl fmt::Display for LabelTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LabelTag {
    type Err = String;

    fn from_str(s: &str) -> Result<LabelTag, String> {
        LabelTag::ALL
            .iter()
            .copied()
            .find(|l| l.as_str() == s)
            .ok_or_else(|| format!("unknown label `{s}`"))
    }
}

/// One mirrored frame, byte-identical to what the switch forwarded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CaptureRecord {
    pub index: u64,
    pub timestamp: SimTime,
    pub bytes: Vec<u8>,
    pub agent: AgentId,
    pub label: LabelTag,
}

/// Errors from capture file I/O.
#[derive(Debug, thiserror::Error)]
pub enum CaptureError {
    #[error("capture i/o: {0}")]
    Io(#[from] io::Error),
    #[error("malformed capture file: {0}")]
    Malformed(String),
}

/// Default in-memory record budget before the log spills to disk.
pub const SPILL_THRESHOLD: usize = 1_000_000;

/// Append-only capture log. Records stay in memory up to the spill
/// threshold; beyond it, full buffers are flushed to an anonymous temp
/// file so arbitrarily long runs stay within bounded memory.
#[derive(Debug)]
pub struct CaptureLog {
    mem: Vec<CaptureRecord>,
    spill: Option<File>,
    spilled: u64,
    threshold: usize,
    next_index: u64,
}

impl Default for CaptureLog {
    fn default() -> CaptureLog {
        CaptureLog::new()
    }
}

impl CaptureLog {
    pub fn new() -> CaptureLog {
        CaptureLog::with_spill_threshold(SPILL_THRESHOLD)
    }

    /// Threshold override for tests; the default suits real runs.
    pub fn with_spill_threshold(threshold: usize) -> CaptureLog {
        CaptureLog {
            mem: Vec::new(),
            spill: None,
            spilled: 0,
            threshold: threshold.max(1),
            next_index: 0,
        }
    }

    pub fn len(&self) -> u64 {
        self.next_index
    }

    pub fn is_empty(&self) -> bool {
        self.next_index == 0
    }

    /// Appends one record; indices are assigned densely in call order,
    /// which the engine guarantees is (timestamp, sequence) order.
    pub fn append(&mut self, timestamp: SimTime, bytes: Vec<u8>, agent: AgentId, label: LabelTag) {
        let record = CaptureRecord {
            index: self.next_index,
            timestamp,
            bytes,
            agent,
            label,
        };
        self.next_index += 1;
        self.mem.push(record);
        if self.mem.len() >= self.threshold {
            self.spill_mem().expect("capture spill to temp file");
        }
    }

    fn spill_mem(&mut self) -> io::Result<()> {
        let file = match self.spill.as_mut() {
            Some(f) => f,
            None => {
                self.spill = Some(tempfile::tempfile()?);
                self.spill.as_mut().unwrap()
            }
        };
        file.seek(SeekFrom::End(0))?;
        let mut w = BufWriter::new(file);
        for record in &self.mem {
            write_spill_record(&mut w, record)?;
        }
        w.flush()?;
        self.spilled += self.mem.len() as u64;
        self.mem.clear();
        Ok(())
    }

    /// Visits every record in capture order. Spilled records are read
    /// back from the temp file first, then the in-memory tail.
    pub fn for_each<E>(
        &self,
        mut visit: impl FnMut(&CaptureRecord) -> Result<(), E>,
    ) -> Result<(), E>
    where
        E: From<io::Error>,
    {
        if let Some(file) = &self.spill {
            let mut file = file.try_clone().map_err(E::from)?;
            file.seek(SeekFrom::Start(0)).map_err(E::from)?;
            let mut r = BufReader::new(file);
            for _ in 0..self.spilled {
                let record = read_spill_record(&mut r).map_err(E::from)?;
                visit(&record)?;
            }
        }
        for record in &self.mem {
            visit(record)?;
        }
        Ok(())
    }

    /// Materializes the whole log; intended for tests and post-run
    /// analysis of desk-scale captures.
    pub fn collect_records(&self) -> Vec<CaptureRecord> {
        let mut out = Vec::with_capacity(self.next_index as usize);
        self.for_each::<io::Error>(|r| {
            out.push(r.clone());
            Ok(())
        })
        .expect("spill readback");
        out
    }
}

fn write_spill_record(w: &mut impl Write, record: &CaptureRecord) -> io::Result<()> {
    w.write_all(&record.index.to_le_bytes())?;
    w.write_all(&record.timestamp.as_nanos().to_le_bytes())?;
    w.write_all(&record.agent.0.to_le_bytes())?;
    w.write_all(&[record.label.to_byte()])?;
    w.write_all(&(record.bytes.len() as u32).to_le_bytes())?;
    w.write_all(&record.bytes)
}

fn read_spill_record(r: &mut impl Read) -> io::Result<CaptureRecord> {
    let mut u64buf = [0u8; 8];
    let mut u32buf = [0u8; 4];
    let mut u8buf = [0u8; 1];
    r.read_exact(&mut u64buf)?;
    let index = u64::from_le_bytes(u64buf);
    r.read_exact(&mut u64buf)?;
    let timestamp = SimTime::from_nanos(u64::from_le_bytes(u64buf));
    r.read_exact(&mut u32buf)?;
    let agent = AgentId(u32::from_le_bytes(u32buf));
    r.read_exact(&mut u8buf)?;
    let label = LabelTag::from_byte(u8buf[0])
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "bad label byte"))?;
    r.read_exact(&mut u32buf)?;
    let len = u32::from_le_bytes(u32buf) as usize;
    let mut bytes = vec![0u8; len];
    r.read_exact(&mut bytes)?;
    Ok(CaptureRecord {
        index,
        timestamp,
        bytes,
        agent,
        label,
    })
}

const PCAP_MAGIC: u32 = 0xa1b2_c3d4;
const PCAP_VERSION_MAJOR: u16 = 2;
const PCAP_VERSION_MINOR: u16 = 4;
const PCAP_SNAPLEN: u32 = 65_535;
const PCAP_LINKTYPE_ETHERNET: u32 = 1;

/// Writes the log as a classic little-endian pcap file (v2.4,
/// Ethernet linktype, microsecond timestamps — sub-microsecond
/// precision of SimTime is truncated).
pub fn write_pcap(log: &CaptureLog, path: &Path) -> Result<(), CaptureError> {
    let mut w = BufWriter::new(File::create(path)?);
    write_pcap_header(&mut w)?;
    log.for_each::<CaptureError>(|record| {
        write_pcap_record(&mut w, record.timestamp, &record.bytes)?;
        Ok(())
    })?;
    w.flush()?;
    Ok(())
}

fn write_pcap_header(w: &mut impl Write) -> io::Result<()> {
    w.write_all(&PCAP_MAGIC.to_le_bytes())?;
    w.write_all(&PCAP_VERSION_MAJOR.to_le_bytes())?;
    w.write_all(&PCAP_VERSION_MINOR.to_le_bytes())?;
    w.write_all(&0i32.to_le_bytes())?; // thiszone
    w.write_all(&0u32.to_le_bytes())?; // sigfigs
    w.write_all(&PCAP_SNAPLEN.to_le_bytes())?;
    w.write_all(&PCAP_LINKTYPE_ETHERNET.to_le_bytes())
}

fn write_pcap_record(w: &mut impl Write, ts: SimTime, bytes: &[u8]) -> io::Result<()> {
    let ns = ts.as_nanos();
    w.write_all(&((ns / 1_000_000_000) as u32).to_le_bytes())?;
    w.write_all(&((ns % 1_000_000_000 / 1_000) as u32).to_le_bytes())?;
    w.write_all(&(bytes.len() as u32).to_le_bytes())?; // incl_len
    w.write_all(&(bytes.len() as u32).to_le_bytes())?; // orig_len
    w.write_all(bytes)
}

/// Writes the label sidecar: one CSV row per pcap record, same order.
pub fn write_labels(
    log: &CaptureLog,
    agent_names: &[String],
    path: &Path,
) -> Result<(), CaptureError> {
    let mut w = BufWriter::new(File::create(path)?);
    writeln!(w, "frame_index,timestamp_ns,agent_id,label")?;
    log.for_each::<CaptureError>(|record| {
        let name = agent_names
            .get(record.agent.0 as usize)
            .map(String::as_str)
            .unwrap_or("unknown");
        writeln!(
            w,
            "{},{},{},{}",
            record.index,
            record.timestamp.as_nanos(),
            name,
            record.label
        )?;
        Ok(())
    })?;
    w.flush()?;
    Ok(())
}

/// Reads a classic little-endian pcap written by [`write_pcap`] back
/// into (timestamp, frame bytes) pairs. Timestamps come back at
/// microsecond granularity.
pub fn read_pcap(path: &Path) -> Result<Vec<(SimTime, Vec<u8>)>, CaptureError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut header = [0u8; 24];
    r.read_exact(&mut header)
        .map_err(|_| CaptureError::Malformed("file shorter than pcap header".into()))?;
    let magic = u32::from_le_bytes(header[0..4].try_into().unwrap());
    if magic != PCAP_MAGIC {
        return Err(CaptureError::Malformed(format!(
            "unexpected magic {magic:#010x}"
        )));
    }
    let linktype = u32::from_le_bytes(header[20..24].try_into().unwrap());
    if linktype != PCAP_LINKTYPE_ETHERNET {
        return Err(CaptureError::Malformed(format!(
            "unsupported linktype {linktype}"
        )));
    }
    let mut records = Vec::new();
    loop {
        let mut rec_header = [0u8; 16];
        match r.read_exact(&mut rec_header) {
            Ok(()) => {}
            Err(e) if e.kind() == io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let sec = u32::from_le_bytes(rec_header[0..4].try_into().unwrap()) as u64;
        let usec = u32::from_le_bytes(rec_header[4..8].try_into().unwrap()) as u64;
        let incl = u32::from_le_bytes(rec_header[8..12].try_into().unwrap()) as usize;
        let mut bytes = vec![0u8; incl];
        r.read_exact(&mut bytes)
            .map_err(|_| CaptureError::Malformed("truncated record body".into()))?;
        records.push((
            SimTime::from_nanos(sec * 1_000_000_000 + usec * 1_000),
            bytes,
        ));
    }
    Ok(records)
}

/// One row of the label sidecar.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelRow {
    pub frame_index: u64,
    pub timestamp: SimTime,
    pub agent_name: String,
    pub label: LabelTag,
}

/// Reads a label sidecar written by [`write_labels`].
pub fn read_labels(path: &Path) -> Result<Vec<LabelRow>, CaptureError> {
    let text = std::fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("frame_index,timestamp_ns,agent_id,label") => {}
        other => {
            return Err(CaptureError::Malformed(format!(
                "bad label header: {other:?}"
            )))
        }
    }
    let mut rows = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let mut fields = line.splitn(4, ',');
        fn parse(field: Option<&str>, lineno: usize) -> Result<&str, CaptureError> {
            field.ok_or_else(move || {
                CaptureError::Malformed(format!("label row {} too short", lineno + 2))
            })
        }
        let frame_index = parse(fields.next(), lineno)?
            .parse::<u64>()
            .map_err(|e| CaptureError::Malformed(format!("row {}: {e}", lineno + 2)))?;
        let ns = parse(fields.next(), lineno)?
            .parse::<u64>()
            .map_err(|e| CaptureError::Malformed(format!("row {}: {e}", lineno + 2)))?;
        let agent_name = parse(fields.next(), lineno)?.to_string();
        let label = parse(fields.next(), lineno)?
            .parse::<LabelTag>()
            .map_err(CaptureError::Malformed)?;
        rows.push(LabelRow {
            frame_index,
            timestamp: SimTime::from_nanos(ns),
            agent_name,
            label,
        });
    }
    Ok(rows)
}

/// Rebuilds capture records from a pcap + label sidecar pair, for
/// offline flow re-extraction. Returns the records and the agent name
/// registry reconstructed from the sidecar.
pub fn read_capture(
    pcap_path: &Path,
    labels_path: &Path,
) -> Result<(Vec<CaptureRecord>, Vec<String>), CaptureError> {
    let frames = read_pcap(pcap_path)?;
    let rows = read_labels(labels_path)?;
    if frames.len() != rows.len() {
        return Err(CaptureError::Malformed(format!(
            "pcap has {} records but sidecar has {} rows",
            frames.len(),
            rows.len()
        )));
    }
    let mut names: Vec<String> = Vec::new();
    let mut records = Vec::with_capacity(frames.len());
    for ((_pcap_ts, bytes), row) in frames.into_iter().zip(rows) {
        let agent = match names.iter().position(|n| *n == row.agent_name) {
            Some(i) => AgentId(i as u32),
            None => {
                names.push(row.agent_name.clone());
                AgentId((names.len() - 1) as u32)
            }
        };
        // The sidecar's nanosecond timestamp is authoritative; the
        // pcap's is microsecond-truncated.
        records.push(CaptureRecord {
            index: row.frame_index,
            timestamp: row.timestamp,
            bytes,
            agent,
            label: row.label,
        });
    }
    Ok((records, names))
}
