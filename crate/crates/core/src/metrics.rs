//! End-user performance metrics over classified traces: hop counts, penultimate-hop
//! RTT, weekly Local Routes and Available Time, box statistics and IXP-centred
//! inter-hop RTT differences.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;
use std::net::Ipv4Addr;
use std::str::FromStr;

use chrono::{DateTime, Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::classify::{Category, ClassifiedTrace};
use crate::record::TraceRecord;
use crate::scope::{AddressScope, Membership};

/// Written into report manifests.
pub const PERCENTILE_METHOD: &str = "linear interpolation between closest ranks (h = (n-1)p)";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricsError {
    #[error("trace {0} did not reach its destination")]
    NotReached(String),
    #[error("trace {0} has no responding hop before the destination")]
    NoPenultimate(String),
    #[error("cannot summarize an empty sample")]
    EmptySample,
    #[error("IXP trace {0} has no IXP hop")]
    MissingIxpHop(String),
    #[error("International trace {0} has no foreign hop")]
    NoForeignHop(String),
}

/// ISO-8601 week.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WeekBucket {
    pub iso_year: i32,
    pub iso_week: u32,
}

impl WeekBucket {
    pub fn new(iso_year: i32, iso_week: u32) -> Option<Self> {
        NaiveDate::from_isoywd_opt(iso_year, iso_week, Weekday::Mon).map(|_| Self { iso_year, iso_week })
    }

    pub fn from_timestamp(ts: i64) -> Option<Self> {
        let week = DateTime::from_timestamp(ts, 0)?.iso_week();
        Some(Self {
            iso_year: week.year(),
            iso_week: week.week(),
        })
    }

    /// Monday of the week.
    pub fn start(&self) -> NaiveDate {
        NaiveDate::from_isoywd_opt(self.iso_year, self.iso_week, Weekday::Mon).expect("validated on construction")
    }
}

impl fmt::Display for WeekBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:04}-W{:02}", self.iso_year, self.iso_week)
    }
}

impl FromStr for WeekBucket {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (y, w) = s.split_once("-W").ok_or_else(|| format!("bad week `{s}`"))?;
        let y = y.parse().map_err(|_| format!("bad week `{s}`"))?;
        let w = w.parse().map_err(|_| format!("bad week `{s}`"))?;
        WeekBucket::new(y, w).ok_or_else(|| format!("no such ISO week `{s}`"))
    }
}

impl Serialize for WeekBucket {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WeekBucket {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

/// Five-number summary used for every box plot, plus mean and count.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub p5: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub p95: f64,
    pub mean: f64,
    pub count: usize,
}

fn percentile_sorted(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn box_stats(samples: &[f64]) -> Result<BoxStats, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySample);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(f64::total_cmp);
    // summing in sorted order keeps the mean independent of input order
    let mean = sorted.iter().sum::<f64>() / sorted.len() as f64;
    Ok(BoxStats {
        p5: percentile_sorted(&sorted, 0.05),
        q1: percentile_sorted(&sorted, 0.25),
        median: percentile_sorted(&sorted, 0.50),
        q3: percentile_sorted(&sorted, 0.75),
        p95: percentile_sorted(&sorted, 0.95),
        mean,
        count: sorted.len(),
    })
}

/// TTL of the destination hop.
pub fn hop_count(trace: &TraceRecord) -> Result<u8, MetricsError> {
    if !trace.reached() {
        return Err(MetricsError::NotReached(trace.trace_id().to_string()));
    }
    let (ttl, _) = trace
        .responding()
        .next_back()
        .expect("reached traces have a responding hop");
    Ok(ttl)
}

/// RTT of the last responding hop before the destination, in microseconds.
///
/// The destination's own reply is skipped because last-mile NAT devices inflate it.
pub fn effective_rtt(trace: &TraceRecord) -> Result<u64, MetricsError> {
    if !trace.reached() {
        return Err(MetricsError::NotReached(trace.trace_id().to_string()));
    }
    let mut responding = trace.responding().rev();
    responding.next();
    responding
        .next()
        .map(|(_, r)| r.rtt_us)
        .ok_or_else(|| MetricsError::NoPenultimate(trace.trace_id().to_string()))
}

fn category_map(value: impl Fn(Category) -> f64) -> BTreeMap<Category, f64> {
    Category::ALL.into_iter().map(|c| (c, value(c))).collect()
}

/// Per week, the share of distinct `(src, dst)` routes seen at least once in each
/// category. A route can fall in several categories, so the shares may sum past 100.
pub fn weekly_local_routes(classified: &[ClassifiedTrace]) -> BTreeMap<WeekBucket, BTreeMap<Category, f64>> {
    let mut weeks: BTreeMap<WeekBucket, BTreeMap<(Ipv4Addr, Ipv4Addr), BTreeSet<Category>>> = BTreeMap::new();
    for c in classified {
        weeks
            .entry(c.week)
            .or_default()
            .entry((c.trace.src(), c.trace.dst()))
            .or_default()
            .insert(c.category);
    }
    weeks
        .into_iter()
        .map(|(week, routes)| {
            let total = routes.len() as f64;
            let pct = category_map(|cat| {
                let n = routes.values().filter(|cats| cats.contains(&cat)).count();
                n as f64 * 100.0 / total
            });
            (week, pct)
        })
        .collect()
}

/// Per week, the share of traces in each category. Always sums to 100.
pub fn weekly_available_time(classified: &[ClassifiedTrace]) -> BTreeMap<WeekBucket, BTreeMap<Category, f64>> {
    let mut weeks: BTreeMap<WeekBucket, BTreeMap<Category, usize>> = BTreeMap::new();
    for c in classified {
        *weeks.entry(c.week).or_default().entry(c.category).or_default() += 1;
    }
    weeks
        .into_iter()
        .map(|(week, counts)| {
            let total: usize = counts.values().sum();
            let pct = category_map(|cat| counts.get(&cat).copied().unwrap_or(0) as f64 * 100.0 / total as f64);
            (week, pct)
        })
        .collect()
}

/// A non-negative RTT difference between adjacent responding hops, placed at the
/// later hop's signed distance from the IXP (or from the foreign segment).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HopOffsetSample {
    pub offset: i32,
    pub diff_us: u64,
    pub category: Category,
    pub probe_id: String,
}

impl HopOffsetSample {
    /// `None` for negative differences, which are dropped.
    pub fn new(offset: i32, diff_us: i64, category: Category, probe_id: &str) -> Option<Self> {
        (diff_us >= 0).then(|| Self {
            offset,
            diff_us: diff_us as u64,
            category,
            probe_id: probe_id.to_string(),
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct InterhopSeries {
    pub samples: BTreeMap<(Category, i32), Vec<HopOffsetSample>>,
    /// Adjacent responding-hop pairs examined.
    pub pairs: usize,
    /// Negative differences dropped.
    pub negatives_dropped: usize,
    /// International traces with more than one foreign run; only the first was collapsed.
    pub multi_foreign_runs: usize,
}

impl InterhopSeries {
    pub fn sample_count(&self) -> usize {
        self.samples.values().map(Vec::len).sum()
    }

    /// Box statistics of `diff_us` per `(category, offset)`.
    pub fn box_stats(&self) -> BTreeMap<(Category, i32), BoxStats> {
        self.samples
            .iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| {
                let diffs: Vec<f64> = v.iter().map(|s| s.diff_us as f64).collect();
                (*k, box_stats(&diffs).expect("non-empty"))
            })
            .collect()
    }

    /// Box statistics split by probe.
    pub fn box_stats_by_probe(&self) -> BTreeMap<(String, Category, i32), BoxStats> {
        let mut split: BTreeMap<(String, Category, i32), Vec<f64>> = BTreeMap::new();
        for ((cat, off), v) in &self.samples {
            for s in v {
                split
                    .entry((s.probe_id.clone(), *cat, *off))
                    .or_default()
                    .push(s.diff_us as f64);
            }
        }
        split
            .into_iter()
            .map(|(k, v)| (k, box_stats(&v).expect("non-empty")))
            .collect()
    }

    fn push_sequence(&mut self, seq: &[(i32, u64)], category: Category, probe_id: &str) {
        for pair in seq.windows(2) {
            self.pairs += 1;
            let (offset, rtt_b) = pair[1];
            let diff = rtt_b as i64 - pair[0].1 as i64;
            match HopOffsetSample::new(offset, diff, category, probe_id) {
                Some(s) => self.samples.entry((category, offset)).or_default().push(s),
                None => self.negatives_dropped += 1,
            }
        }
    }
}

/// Inter-hop RTT differences centred on the IXP hop (IXP traces) or on the collapsed
/// foreign segment (International traces). Other categories are ignored.
///
/// Offsets count responding hops only. Each difference `rtt(b) - rtt(a)` of adjacent
/// responding hops is assigned to `b`'s offset; negative differences are dropped.
/// For International traces the first maximal run of foreign hops becomes a single
/// virtual hop at offset 0 carrying the RTT of the run's last hop.
pub fn interhop_series(classified: &[ClassifiedTrace], scope: &AddressScope) -> Result<InterhopSeries, MetricsError> {
    let mut series = InterhopSeries::default();
    for c in classified {
        let trace = &c.trace;
        let hops: Vec<(u8, u64, Ipv4Addr)> = trace.responding().map(|(ttl, r)| (ttl, r.rtt_us, r.addr)).collect();
        match c.category {
            Category::Ixp => {
                let anchor_ttl = c
                    .ixp_hop_ttl
                    .ok_or_else(|| MetricsError::MissingIxpHop(trace.trace_id().to_string()))?;
                let anchor = hops
                    .iter()
                    .position(|h| h.0 == anchor_ttl)
                    .ok_or_else(|| MetricsError::MissingIxpHop(trace.trace_id().to_string()))?;
                let seq: Vec<(i32, u64)> = hops
                    .iter()
                    .enumerate()
                    .map(|(i, h)| (i as i32 - anchor as i32, h.1))
                    .collect();
                series.push_sequence(&seq, Category::Ixp, trace.probe_id());
            }
            Category::International => {
                let foreign: Vec<bool> = hops
                    .iter()
                    .map(|h| scope.membership(h.2) == Membership::Foreign)
                    .collect();
                let start = foreign
                    .iter()
                    .position(|&f| f)
                    .ok_or_else(|| MetricsError::NoForeignHop(trace.trace_id().to_string()))?;
                let end = foreign[start..]
                    .iter()
                    .position(|&f| !f)
                    .map_or(hops.len(), |n| start + n);
                if foreign[end..].iter().any(|&f| f) {
                    series.multi_foreign_runs += 1;
                    log::debug!("trace {} has several foreign runs", trace.trace_id());
                }
                let mut seq: Vec<(i32, u64)> = Vec::with_capacity(hops.len());
                for (i, h) in hops[..start].iter().enumerate() {
                    seq.push((i as i32 - start as i32, h.1));
                }
                seq.push((0, hops[end - 1].1));
                for (i, h) in hops[end..].iter().enumerate() {
                    seq.push((i as i32 + 1, h.1));
                }
                series.push_sequence(&seq, Category::International, trace.probe_id());
            }
            Category::P2p | Category::Misbehavior => {}
        }
    }
    Ok(series)
}

#[derive(Debug, Clone, PartialEq)]
pub struct WeeklyReport {
    pub week: WeekBucket,
    pub local_routes_pct: BTreeMap<Category, f64>,
    pub available_time_pct: BTreeMap<Category, f64>,
    /// Only categories with traces that week.
    pub hops: BTreeMap<Category, BoxStats>,
    pub rtt: BTreeMap<Category, BoxStats>,
    pub route_count: usize,
    pub trace_count: usize,
    /// Traces left out of `rtt` for lack of a penultimate hop.
    pub rtt_excluded: usize,
}

/// One report per week present in the input, ascending.
pub fn build_weekly_report(classified: &[ClassifiedTrace]) -> Vec<WeeklyReport> {
    let local = weekly_local_routes(classified);
    let avail = weekly_available_time(classified);

    #[derive(Default)]
    struct Acc {
        hops: BTreeMap<Category, Vec<f64>>,
        rtt: BTreeMap<Category, Vec<f64>>,
        routes: BTreeSet<(Ipv4Addr, Ipv4Addr)>,
        traces: usize,
        excluded: usize,
    }
    let mut acc: BTreeMap<WeekBucket, Acc> = BTreeMap::new();
    for c in classified {
        let a = acc.entry(c.week).or_default();
        a.traces += 1;
        a.routes.insert((c.trace.src(), c.trace.dst()));
        if let Ok(h) = hop_count(&c.trace) {
            a.hops.entry(c.category).or_default().push(h as f64);
        }
        match effective_rtt(&c.trace) {
            Ok(rtt) => a.rtt.entry(c.category).or_default().push(rtt as f64),
            Err(_) => a.excluded += 1,
        }
    }

    let summarize = |m: BTreeMap<Category, Vec<f64>>| -> BTreeMap<Category, BoxStats> {
        m.into_iter()
            .filter_map(|(c, v)| box_stats(&v).ok().map(|b| (c, b)))
            .collect()
    };

    acc.into_iter()
        .map(|(week, a)| WeeklyReport {
            week,
            local_routes_pct: local[&week].clone(),
            available_time_pct: avail[&week].clone(),
            hops: summarize(a.hops),
            rtt: summarize(a.rtt),
            route_count: a.routes.len(),
            trace_count: a.traces,
            rtt_excluded: a.excluded,
        })
        .collect()
}

fn fmt_num(x: f64) -> String {
    format!("{x:.3}")
}

fn box_fields(b: &BoxStats, with_mean: bool) -> Vec<String> {
    let mut v = vec![
        fmt_num(b.p5),
        fmt_num(b.q1),
        fmt_num(b.median),
        fmt_num(b.q3),
        fmt_num(b.p95),
    ];
    if with_mean {
        v.push(fmt_num(b.mean));
    }
    v.push(b.count.to_string());
    v
}

const BOX_HEADER: [&str; 9] = ["week", "category", "p5", "q1", "median", "q3", "p95", "mean", "count"];

/// `hops_weekly.csv`.
pub fn write_hops_csv<W: Write>(out: W, reports: &[WeeklyReport]) -> std::io::Result<()> {
    write_weekly_box_csv(out, reports, |r| &r.hops)
}

/// `rtt_weekly.csv`, in microseconds.
pub fn write_rtt_csv<W: Write>(out: W, reports: &[WeeklyReport]) -> std::io::Result<()> {
    write_weekly_box_csv(out, reports, |r| &r.rtt)
}

fn write_weekly_box_csv<W: Write>(
    out: W,
    reports: &[WeeklyReport],
    pick: impl Fn(&WeeklyReport) -> &BTreeMap<Category, BoxStats>,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(BOX_HEADER)?;
    for r in reports {
        for (cat, b) in pick(r) {
            let mut row = vec![r.week.to_string(), cat.to_string()];
            row.extend(box_fields(b, true));
            w.write_record(&row)?;
        }
    }
    w.flush()
}

/// `local_routes.csv`.
pub fn write_local_routes_csv<W: Write>(out: W, reports: &[WeeklyReport]) -> std::io::Result<()> {
    write_pct_csv(out, reports, |r| &r.local_routes_pct)
}

/// `available_time.csv`.
pub fn write_available_time_csv<W: Write>(out: W, reports: &[WeeklyReport]) -> std::io::Result<()> {
    write_pct_csv(out, reports, |r| &r.available_time_pct)
}

fn write_pct_csv<W: Write>(
    out: W,
    reports: &[WeeklyReport],
    pick: impl Fn(&WeeklyReport) -> &BTreeMap<Category, f64>,
) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["week", "category", "pct"])?;
    for r in reports {
        for (cat, pct) in pick(r) {
            w.write_record([r.week.to_string(), cat.to_string(), fmt_num(*pct)])?;
        }
    }
    w.flush()
}

/// `interhop.csv`.
pub fn write_interhop_csv<W: Write>(out: W, series: &InterhopSeries) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["category", "offset", "p5", "q1", "median", "q3", "p95", "count"])?;
    for ((cat, off), b) in series.box_stats() {
        let mut row = vec![cat.to_string(), off.to_string()];
        row.extend(box_fields(&b, false));
        w.write_record(&row)?;
    }
    w.flush()
}

/// Per-probe variant of `interhop.csv` with a leading `probe_id` column.
pub fn write_interhop_by_probe_csv<W: Write>(out: W, series: &InterhopSeries) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record([
        "probe_id", "category", "offset", "p5", "q1", "median", "q3", "p95", "count",
    ])?;
    for ((probe, cat, off), b) in series.box_stats_by_probe() {
        let mut row = vec![probe, cat.to_string(), off.to_string()];
        row.extend(box_fields(&b, false));
        w.write_record(&row)?;
    }
    w.flush()
}
