//! The trace record model and its JSON-lines wire format.
//!
//! One record per line, fields `trace_id, probe_id, ts, src, dst, flow_id, reached, hops`;
//! each hop is `{ttl, addr, rtt_us}` with `addr` and `rtt_us` null for a star.

use std::io::{BufRead, Write};
use std::net::Ipv4Addr;

use serde::{Deserialize, Serialize};

/// Paris flow identifier. In ICMP mode this is the constant ICMP checksum.
pub type FlowId = u16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct HopReply {
    pub addr: Ipv4Addr,
    pub rtt_us: u64,
}

/// One TTL step of a traceroute. `reply` is `None` for a star.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawHop", into = "RawHop")]
pub struct Hop {
    pub ttl: u8,
    pub reply: Option<HopReply>,
}

impl Hop {
    pub fn reply(ttl: u8, addr: Ipv4Addr, rtt_us: u64) -> Self {
        Self {
            ttl,
            reply: Some(HopReply { addr, rtt_us }),
        }
    }

    pub fn star(ttl: u8) -> Self {
        Self { ttl, reply: None }
    }

    pub fn addr(&self) -> Option<Ipv4Addr> {
        self.reply.map(|r| r.addr)
    }

    pub fn rtt_us(&self) -> Option<u64> {
        self.reply.map(|r| r.rtt_us)
    }

    pub fn is_star(&self) -> bool {
        self.reply.is_none()
    }
}

#[derive(Serialize, Deserialize)]
struct RawHop {
    ttl: u8,
    addr: Option<Ipv4Addr>,
    rtt_us: Option<u64>,
}

impl TryFrom<RawHop> for Hop {
    type Error = RecordError;

    fn try_from(raw: RawHop) -> Result<Self, Self::Error> {
        if raw.ttl == 0 {
            return Err(RecordError::ZeroTtl);
        }
        match (raw.addr, raw.rtt_us) {
            (Some(addr), Some(rtt_us)) => Ok(Hop::reply(raw.ttl, addr, rtt_us)),
            (None, None) => Ok(Hop::star(raw.ttl)),
            _ => Err(RecordError::HalfHop(raw.ttl)),
        }
    }
}

impl From<Hop> for RawHop {
    fn from(hop: Hop) -> Self {
        RawHop {
            ttl: hop.ttl,
            addr: hop.addr(),
            rtt_us: hop.rtt_us(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RecordError {
    #[error("hop ttl must be at least 1")]
    ZeroTtl,
    #[error("hop at ttl {0} has only one of addr/rtt_us")]
    HalfHop(u8),
    #[error("hops not strictly ascending by ttl at ttl {0}")]
    UnorderedHops(u8),
    #[error("`reached` is {stored} but the hops say {derived}")]
    ReachedMismatch { stored: bool, derived: bool },
}

/// A single traceroute.
///
/// Invariants are enforced at construction and on deserialization: hops are strictly
/// ascending by TTL, and `reached` holds exactly when the last responding hop is the
/// destination.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawRecord", into = "RawRecord")]
pub struct TraceRecord {
    trace_id: String,
    probe_id: String,
    timestamp_utc: i64,
    src: Ipv4Addr,
    dst: Ipv4Addr,
    flow_id: FlowId,
    hops: Vec<Hop>,
    reached: bool,
}

#[derive(Serialize, Deserialize)]
struct RawRecord {
    trace_id: String,
    probe_id: String,
    ts: i64,
    src: Ipv4Addr,
    dst: Ipv4Addr,
    flow_id: FlowId,
    reached: bool,
    hops: Vec<Hop>,
}

impl TryFrom<RawRecord> for TraceRecord {
    type Error = RecordError;

    fn try_from(raw: RawRecord) -> Result<Self, Self::Error> {
        let rec = TraceRecord::new(
            raw.trace_id,
            raw.probe_id,
            raw.ts,
            raw.src,
            raw.dst,
            raw.flow_id,
            raw.hops,
        )?;
        if rec.reached != raw.reached {
            return Err(RecordError::ReachedMismatch {
                stored: raw.reached,
                derived: rec.reached,
            });
        }
        Ok(rec)
    }
}

impl From<TraceRecord> for RawRecord {
    fn from(r: TraceRecord) -> Self {
        RawRecord {
            trace_id: r.trace_id,
            probe_id: r.probe_id,
            ts: r.timestamp_utc,
            src: r.src,
            dst: r.dst,
            flow_id: r.flow_id,
            reached: r.reached,
            hops: r.hops,
        }
    }
}

impl TraceRecord {
    pub fn new(
        trace_id: impl Into<String>,
        probe_id: impl Into<String>,
        timestamp_utc: i64,
        src: Ipv4Addr,
        dst: Ipv4Addr,
        flow_id: FlowId,
        hops: Vec<Hop>,
    ) -> Result<Self, RecordError> {
        for pair in hops.windows(2) {
            if pair[1].ttl <= pair[0].ttl {
                return Err(RecordError::UnorderedHops(pair[1].ttl));
            }
        }
        if hops.iter().any(|h| h.ttl == 0) {
            return Err(RecordError::ZeroTtl);
        }
        let reached = hops.iter().rev().find_map(|h| h.addr()) == Some(dst);
        Ok(Self {
            trace_id: trace_id.into(),
            probe_id: probe_id.into(),
            timestamp_utc,
            src,
            dst,
            flow_id,
            hops,
            reached,
        })
    }

    pub fn trace_id(&self) -> &str {
        &self.trace_id
    }

    pub fn probe_id(&self) -> &str {
        &self.probe_id
    }

    pub fn timestamp_utc(&self) -> i64 {
        self.timestamp_utc
    }

    pub fn src(&self) -> Ipv4Addr {
        self.src
    }

    pub fn dst(&self) -> Ipv4Addr {
        self.dst
    }

    pub fn flow_id(&self) -> FlowId {
        self.flow_id
    }

    pub fn hops(&self) -> &[Hop] {
        &self.hops
    }

    pub fn reached(&self) -> bool {
        self.reached
    }

    /// Hops that produced a reply, in TTL order.
    pub fn responding(&self) -> impl DoubleEndedIterator<Item = (u8, HopReply)> + '_ {
        self.hops.iter().filter_map(|h| h.reply.map(|r| (h.ttl, r)))
    }

    pub fn responding_count(&self) -> usize {
        self.responding().count()
    }

    /// Same record under a different probe id.
    pub fn with_probe_id(mut self, probe_id: impl Into<String>) -> Self {
        self.probe_id = probe_id.into();
        self
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("trace records always serialize")
    }
}

#[derive(Debug, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct LineError {
    pub line: usize,
    pub message: String,
}

/// Reads trace JSON-lines, collecting malformed lines as diagnostics instead of failing.
/// Blank lines are skipped.
pub fn read_jsonl<R: BufRead>(reader: R) -> std::io::Result<(Vec<TraceRecord>, Vec<LineError>)> {
    let mut records = Vec::new();
    let mut errors = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<TraceRecord>(&line) {
            Ok(r) => records.push(r),
            Err(e) => errors.push(LineError {
                line: idx + 1,
                message: e.to_string(),
            }),
        }
    }
    Ok((records, errors))
}

pub fn write_jsonl<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a TraceRecord>,
) -> std::io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}
