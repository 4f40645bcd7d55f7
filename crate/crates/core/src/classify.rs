//! Route classification into IXP, P2P, International and Misbehavior.

use std::fmt;
use std::io::BufRead;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::metrics::WeekBucket;
use crate::record::{read_jsonl, LineError, TraceRecord};
use crate::scope::{AddressScope, Membership};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Category {
    #[serde(rename = "IXP")]
    Ixp,
    #[serde(rename = "P2P")]
    P2p,
    International,
    Misbehavior,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Ixp,
        Category::P2p,
        Category::International,
        Category::Misbehavior,
    ];

    /// The 2x2 table over (passed the IXP, every responding hop in-country).
    pub fn from_predicates(has_ixp: bool, all_domestic: bool) -> Self {
        match (has_ixp, all_domestic) {
            (true, true) => Category::Ixp,
            (false, true) => Category::P2p,
            (false, false) => Category::International,
            (true, false) => Category::Misbehavior,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Ixp => "IXP",
            Category::P2p => "P2P",
            Category::International => "International",
            Category::Misbehavior => "Misbehavior",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown category `{s}`"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassifiedTrace {
    #[serde(flatten)]
    pub trace: TraceRecord,
    pub category: Category,
    pub ixp_hop_ttl: Option<u8>,
    pub week: WeekBucket,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ClassifyError {
    #[error("trace {0} did not reach its destination")]
    NotReached(String),
    #[error("trace {0} has a timestamp outside the calendar range")]
    BadTimestamp(String),
}

/// Stars are ignored; the destination counts like any other responding hop.
pub fn classify(trace: TraceRecord, scope: &AddressScope) -> Result<ClassifiedTrace, ClassifyError> {
    if !trace.reached() {
        return Err(ClassifyError::NotReached(trace.trace_id().to_string()));
    }
    let week = WeekBucket::from_timestamp(trace.timestamp_utc())
        .ok_or_else(|| ClassifyError::BadTimestamp(trace.trace_id().to_string()))?;

    let mut ixp_hop_ttl = None;
    let mut ixp_hops = 0usize;
    let mut all_domestic = true;
    for (ttl, reply) in trace.responding() {
        match scope.membership(reply.addr) {
            Membership::Ixp => {
                ixp_hops += 1;
                ixp_hop_ttl.get_or_insert(ttl);
            }
            Membership::Foreign => all_domestic = false,
            Membership::Domestic | Membership::Private => {}
        }
    }
    if ixp_hops > 1 {
        log::warn!("trace {} crosses the IXP prefix {} times", trace.trace_id(), ixp_hops);
    }
    let category = Category::from_predicates(ixp_hop_ttl.is_some(), all_domestic);
    Ok(ClassifiedTrace {
        trace,
        category,
        ixp_hop_ttl,
        week,
    })
}

#[derive(Debug, Default)]
pub struct BatchOutcome {
    pub classified: Vec<ClassifiedTrace>,
    /// Traces dropped because they never reached their destination.
    pub rejected: usize,
    /// Lines that failed to parse.
    pub diagnostics: Vec<LineError>,
}

/// Classifies in input order, dropping and counting unreached traces.
pub fn classify_records(records: impl IntoIterator<Item = TraceRecord>, scope: &AddressScope) -> BatchOutcome {
    let mut out = BatchOutcome::default();
    for rec in records {
        match classify(rec, scope) {
            Ok(c) => out.classified.push(c),
            Err(ClassifyError::NotReached(_)) => out.rejected += 1,
            Err(e @ ClassifyError::BadTimestamp(_)) => out.diagnostics.push(LineError {
                line: 0,
                message: e.to_string(),
            }),
        }
    }
    out
}

/// Like [`classify_records`] over JSON-lines input; malformed lines become diagnostics.
pub fn classify_batch<R: BufRead>(reader: R, scope: &AddressScope) -> std::io::Result<BatchOutcome> {
    let (records, diagnostics) = read_jsonl(reader)?;
    let mut out = classify_records(records, scope);
    out.diagnostics.splice(0..0, diagnostics);
    Ok(out)
}
