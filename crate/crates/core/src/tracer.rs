//! Paris-traceroute probe engine and the daily sweep scheduler.
//!
//! Backends answer one TTL-limited probe at a time; the tracer keeps the flow id
//! fixed for the whole trace so per-flow load balancers keep it on one path. All
//! timing goes through a [`Clock`], so simulated sweeps run on virtual time.

use std::collections::VecDeque;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicI64, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::record::{FlowId, Hop, RecordError, TraceRecord};
use crate::targets::Target;
use crate::util::mix_all;

pub const MICROS_PER_SEC: i64 = 1_000_000;
const SECS_PER_DAY: i64 = 86_400;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TraceConfig {
    pub max_ttl: u8,
    pub attempts_per_ttl: u32,
    pub per_probe_timeout_ms: u64,
    pub flow_id: FlowId,
    pub gap_limit: u32,
    pub probes_per_second: u32,
}

impl Default for TraceConfig {
    fn default() -> Self {
        Self {
            max_ttl: 30,
            attempts_per_ttl: 2,
            per_probe_timeout_ms: 2000,
            flow_id: 1,
            gap_limit: 5,
            probes_per_second: 20,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("trace config field `{0}` must be positive")]
pub struct ConfigError(pub &'static str);

impl TraceConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        let checks = [
            ("max_ttl", self.max_ttl as u64),
            ("attempts_per_ttl", self.attempts_per_ttl as u64),
            ("per_probe_timeout_ms", self.per_probe_timeout_ms),
            ("flow_id", self.flow_id as u64),
            ("gap_limit", self.gap_limit as u64),
            ("probes_per_second", self.probes_per_second as u64),
        ];
        match checks.iter().find(|(_, v)| *v == 0) {
            Some((name, _)) => Err(ConfigError(name)),
            None => Ok(()),
        }
    }

    fn timeout_us(&self) -> i64 {
        self.per_probe_timeout_ms as i64 * 1000
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Probe {
    pub dst: Ipv4Addr,
    pub ttl: u8,
    pub flow_id: FlowId,
    pub timeout: Duration,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind")]
pub enum ProbeReply {
    TtlExceeded {
        responder: Ipv4Addr,
        rtt_us: u64,
    },
    /// Echo reply, or an unreachable error sent by the destination itself.
    EchoReply {
        responder: Ipv4Addr,
        rtt_us: u64,
    },
    Timeout,
}

impl ProbeReply {
    pub fn responder(&self) -> Option<Ipv4Addr> {
        match *self {
            ProbeReply::TtlExceeded { responder, .. } | ProbeReply::EchoReply { responder, .. } => Some(responder),
            ProbeReply::Timeout => None,
        }
    }

    pub fn rtt_us(&self) -> Option<u64> {
        match *self {
            ProbeReply::TtlExceeded { rtt_us, .. } | ProbeReply::EchoReply { rtt_us, .. } => Some(rtt_us),
            ProbeReply::Timeout => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum BackendError {
    /// The backend cannot send at all; sweeps abort.
    #[error("probing backend unavailable: {0}")]
    Unavailable(String),
    /// This destination cannot be probed; the trace is dropped.
    #[error("destination unroutable: {0}")]
    Unroutable(String),
}

/// Sends one probe and waits for its reply. Implementations must allow concurrent
/// callers and match replies by (flow_id, ttl, dst).
pub trait ProbingBackend: Send + Sync {
    fn send(&self, probe: &Probe) -> Result<ProbeReply, BackendError>;

    /// Source address written into records.
    fn local_addr(&self) -> Ipv4Addr;
}

/// Microsecond clock. Simulated runs use [`VirtualClock`].
pub trait Clock: Send + Sync {
    fn now_us(&self) -> i64;
    fn sleep_until(&self, t_us: i64);
}

#[derive(Debug, Default)]
pub struct SystemClock;

impl Clock for SystemClock {
    fn now_us(&self) -> i64 {
        Utc::now().timestamp_micros()
    }

    fn sleep_until(&self, t_us: i64) {
        let now = self.now_us();
        if t_us > now {
            std::thread::sleep(Duration::from_micros((t_us - now) as u64));
        }
    }
}

/// Time only moves when someone sleeps; sleeping never blocks.
#[derive(Debug)]
pub struct VirtualClock(AtomicI64);

impl VirtualClock {
    pub fn starting_at(t_us: i64) -> Self {
        Self(AtomicI64::new(t_us))
    }
}

impl Clock for VirtualClock {
    fn now_us(&self) -> i64 {
        self.0.load(Ordering::SeqCst)
    }

    fn sleep_until(&self, t_us: i64) {
        self.0.fetch_max(t_us, Ordering::SeqCst);
    }
}

/// Daily active hours in UTC, as an offset and a length in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DutyWindow {
    pub start_secs: u32,
    pub duration_secs: u32,
}

impl Default for DutyWindow {
    fn default() -> Self {
        Self {
            start_secs: 0,
            duration_secs: 20 * 3600,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("bad duty window `{0}` (expected e.g. `20h` or `02:00-22:00`)")]
pub struct WindowParseError(String);

impl DutyWindow {
    pub const ALWAYS: DutyWindow = DutyWindow {
        start_secs: 0,
        duration_secs: SECS_PER_DAY as u32,
    };

    /// Accepts `<hours>h` (starting at midnight) or `HH:MM-HH:MM`; equal ends mean zero hours.
    pub fn parse(text: &str) -> Result<Self, WindowParseError> {
        let bad = || WindowParseError(text.to_string());
        let text = text.trim();
        if let Some(h) = text.strip_suffix('h') {
            let hours: u32 = h.parse().map_err(|_| bad())?;
            if hours > 24 {
                return Err(bad());
            }
            return Ok(Self {
                start_secs: 0,
                duration_secs: hours * 3600,
            });
        }
        let (a, b) = text.split_once('-').ok_or_else(bad)?;
        let clock = |s: &str| -> Result<u32, WindowParseError> {
            let (h, m) = s.split_once(':').ok_or_else(bad)?;
            let (h, m): (u32, u32) = (h.parse().map_err(|_| bad())?, m.parse().map_err(|_| bad())?);
            if h > 23 || m > 59 {
                return Err(bad());
            }
            Ok(h * 3600 + m * 60)
        };
        let (start, end) = (clock(a)?, clock(b)?);
        let day = SECS_PER_DAY as u32;
        Ok(Self {
            start_secs: start,
            duration_secs: (end + day - start) % day,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.duration_secs == 0
    }

    fn offset_in_window(&self, t_us: i64) -> i64 {
        let secs = t_us.div_euclid(MICROS_PER_SEC);
        (secs - self.start_secs as i64).rem_euclid(SECS_PER_DAY) * MICROS_PER_SEC + t_us.rem_euclid(MICROS_PER_SEC)
    }

    pub fn contains(&self, t_us: i64) -> bool {
        self.duration_secs as i64 >= SECS_PER_DAY
            || self.offset_in_window(t_us) < self.duration_secs as i64 * MICROS_PER_SEC
    }

    /// Earliest instant at or after `t_us` inside the window.
    pub fn next_open(&self, t_us: i64) -> Option<i64> {
        if self.is_empty() {
            None
        } else if self.contains(t_us) {
            Some(t_us)
        } else {
            Some(t_us + SECS_PER_DAY * MICROS_PER_SEC - self.offset_in_window(t_us))
        }
    }

    /// Start of the window that opens on the UTC day holding `t_us`.
    pub fn opening_on_day_of(&self, t_us: i64) -> i64 {
        let day = t_us.div_euclid(SECS_PER_DAY * MICROS_PER_SEC);
        (day * SECS_PER_DAY + self.start_secs as i64) * MICROS_PER_SEC
    }
}

/// Sliding-window rate limiter: at most `limit` send slots in any one second.
#[derive(Debug)]
struct RateLimiter {
    limit: usize,
    recent: VecDeque<i64>,
}

impl RateLimiter {
    fn new(limit: u32) -> Self {
        Self {
            limit: limit as usize,
            recent: VecDeque::with_capacity(limit as usize),
        }
    }

    fn earliest(&self, t_us: i64) -> i64 {
        let mut slot = t_us.max(self.recent.back().copied().unwrap_or(i64::MIN));
        if self.recent.len() == self.limit {
            slot = slot.max(self.recent[0] + MICROS_PER_SEC);
        }
        slot
    }

    fn commit(&mut self, slot: i64) {
        if self.recent.len() == self.limit {
            self.recent.pop_front();
        }
        self.recent.push_back(slot);
    }
}

/// Admits probes: inside the duty window and under the global rate cap.
pub struct Pacer<'c> {
    clock: &'c dyn Clock,
    window: DutyWindow,
    limiter: Mutex<RateLimiter>,
    sent: Option<Mutex<Vec<i64>>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("duty window is empty")]
pub struct WindowClosed;

impl<'c> Pacer<'c> {
    pub fn new(clock: &'c dyn Clock, window: DutyWindow, probes_per_second: u32) -> Self {
        assert!(probes_per_second > 0);
        Self {
            clock,
            window,
            limiter: Mutex::new(RateLimiter::new(probes_per_second)),
            sent: None,
        }
    }

    /// Keeps every admitted send time for later inspection.
    pub fn recording(mut self) -> Self {
        self.sent = Some(Mutex::new(Vec::new()));
        self
    }

    pub fn sent_times(&self) -> Vec<i64> {
        self.sent
            .as_ref()
            .map(|s| s.lock().unwrap().clone())
            .unwrap_or_default()
    }

    pub fn clock(&self) -> &dyn Clock {
        self.clock
    }

    pub fn window(&self) -> DutyWindow {
        self.window
    }

    /// Blocks (on the clock) until a probe may go out and returns its send time.
    pub fn admit(&self) -> Result<i64, WindowClosed> {
        let slot = {
            let mut lim = self.limiter.lock().unwrap();
            let mut t = self.window.next_open(self.clock.now_us()).ok_or(WindowClosed)?;
            loop {
                let slot = lim.earliest(t);
                if self.window.contains(slot) {
                    lim.commit(slot);
                    break slot;
                }
                t = self.window.next_open(slot).ok_or(WindowClosed)?;
            }
        };
        if let Some(sent) = &self.sent {
            sent.lock().unwrap().push(slot);
        }
        self.clock.sleep_until(slot);
        Ok(slot)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TraceError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error(transparent)]
    Window(#[from] WindowClosed),
    #[error(transparent)]
    Record(#[from] RecordError),
}

/// Runs one Paris traceroute towards `dst`.
///
/// Stops at the destination's reply, at `max_ttl`, or after `gap_limit` consecutive
/// silent TTLs. The record's timestamp is the first probe's send time.
pub fn trace(
    trace_id: &str,
    probe_id: &str,
    dst: Ipv4Addr,
    cfg: &TraceConfig,
    backend: &dyn ProbingBackend,
    pacer: &Pacer<'_>,
) -> Result<TraceRecord, TraceError> {
    let timeout = Duration::from_millis(cfg.per_probe_timeout_ms);
    let clock = pacer.clock();
    let mut hops = Vec::new();
    let mut started = None;
    let mut silent_run = 0u32;
    for ttl in 1..=cfg.max_ttl {
        let mut answer = None;
        for _ in 0..cfg.attempts_per_ttl {
            let sent_at = pacer.admit()?;
            started.get_or_insert(sent_at);
            let reply = backend.send(&Probe {
                dst,
                ttl,
                flow_id: cfg.flow_id,
                timeout,
            })?;
            match reply.rtt_us() {
                Some(rtt) => {
                    clock.sleep_until(sent_at + rtt as i64);
                    answer = Some(reply);
                    break;
                }
                None => clock.sleep_until(sent_at + cfg.timeout_us()),
            }
        }
        match answer {
            Some(reply) => {
                silent_run = 0;
                let responder = reply.responder().expect("answered");
                hops.push(Hop::reply(ttl, responder, reply.rtt_us().expect("answered")));
                if responder == dst || matches!(reply, ProbeReply::EchoReply { .. }) {
                    break;
                }
            }
            None => {
                hops.push(Hop::star(ttl));
                silent_run += 1;
                if silent_run >= cfg.gap_limit {
                    break;
                }
            }
        }
    }
    let ts = started.unwrap_or_else(|| clock.now_us()).div_euclid(MICROS_PER_SEC);
    Ok(TraceRecord::new(
        trace_id,
        probe_id,
        ts,
        backend.local_addr(),
        dst,
        cfg.flow_id,
        hops,
    )?)
}

/// Receives finished traces. Records arrive in completion order.
pub trait TraceSink {
    fn write(&mut self, record: &TraceRecord) -> std::io::Result<()>;

    /// Called once when a sweep aborts after a write failure.
    fn mark_partial(&mut self) -> std::io::Result<()> {
        Ok(())
    }

    fn flush(&mut self) -> std::io::Result<()> {
        Ok(())
    }
}

impl TraceSink for Vec<TraceRecord> {
    fn write(&mut self, record: &TraceRecord) -> std::io::Result<()> {
        self.push(record.clone());
        Ok(())
    }
}

pub fn yyyymmdd(ts: i64) -> String {
    DateTime::<Utc>::from_timestamp(ts, 0)
        .map(|d| d.format("%Y%m%d").to_string())
        .unwrap_or_else(|| "00000000".to_string())
}

/// Writes `traces-<probe_id>-<YYYYMMDD>.jsonl` files, picking the day from each
/// record's timestamp. Files are appended to.
pub struct DailyFileSink {
    dir: PathBuf,
    probe_id: String,
    current: Option<(String, BufWriter<File>)>,
    written: Vec<PathBuf>,
}

impl DailyFileSink {
    pub fn new(dir: impl Into<PathBuf>, probe_id: impl Into<String>) -> Self {
        Self {
            dir: dir.into(),
            probe_id: probe_id.into(),
            current: None,
            written: Vec::new(),
        }
    }

    pub fn path_for(dir: &Path, probe_id: &str, day: &str) -> PathBuf {
        dir.join(format!("traces-{probe_id}-{day}.jsonl"))
    }

    /// Files touched so far, in first-write order.
    pub fn files(&self) -> &[PathBuf] {
        &self.written
    }
}

impl TraceSink for DailyFileSink {
    fn write(&mut self, record: &TraceRecord) -> std::io::Result<()> {
        let day = yyyymmdd(record.timestamp_utc());
        if self.current.as_ref().map(|(d, _)| d != &day).unwrap_or(true) {
            if let Some((_, mut w)) = self.current.take() {
                w.flush()?;
            }
            let path = Self::path_for(&self.dir, &self.probe_id, &day);
            let file = OpenOptions::new().create(true).append(true).open(&path)?;
            if !self.written.contains(&path) {
                self.written.push(path);
            }
            self.current = Some((day, BufWriter::new(file)));
        }
        let (_, w) = self.current.as_mut().expect("opened above");
        w.write_all(record.to_json_line().as_bytes())?;
        w.write_all(b"\n")
    }

    fn mark_partial(&mut self) -> std::io::Result<()> {
        let target = match &self.current {
            Some((day, _)) => Self::path_for(&self.dir, &self.probe_id, day),
            None => self.dir.join(format!("traces-{}.jsonl", self.probe_id)),
        };
        let mut marker = target.into_os_string();
        marker.push(".partial");
        std::fs::write(marker, b"sweep aborted after a write failure\n")
    }

    fn flush(&mut self) -> std::io::Result<()> {
        match &mut self.current {
            Some((_, w)) => w.flush(),
            None => Ok(()),
        }
    }
}

/// How each trace of a sweep gets its flow id.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlowAssignment {
    /// Every trace uses `TraceConfig::flow_id`.
    Fixed,
    /// A per-destination value derived from the salt (e.g. the day), never zero.
    PerDestination { salt: u64 },
}

impl FlowAssignment {
    pub fn flow_for(&self, base: FlowId, dst: Ipv4Addr) -> FlowId {
        match *self {
            FlowAssignment::Fixed => base,
            FlowAssignment::PerDestination { salt } => {
                let v = (mix_all(&[salt, base as u64, u32::from(dst) as u64]) % 0xFFFF) as FlowId;
                v + 1
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct SweepOptions {
    pub probe_id: String,
    pub workers: usize,
    pub flows: FlowAssignment,
    /// When set, workers stop picking up new targets; finished traces are still written.
    pub cancel: Option<Arc<AtomicBool>>,
}

impl SweepOptions {
    pub fn new(probe_id: impl Into<String>) -> Self {
        Self {
            probe_id: probe_id.into(),
            workers: 1,
            flows: FlowAssignment::Fixed,
            cancel: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SweepSummary {
    pub reached: usize,
    pub unreached: usize,
    /// Targets the backend could not route to; no record is emitted for them.
    pub failed: usize,
}

impl SweepSummary {
    pub fn emitted(&self) -> usize {
        self.reached + self.unreached
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SweepError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("sink write failed after {written} records: {source}")]
    Sink {
        written: usize,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Backend(BackendError),
}

/// Probes every target once, inside the duty window, with `opts.workers` concurrent traces.
///
/// Trace ids are `<probe_id>-<YYYYMMDD>-<index>` where the index is the target's
/// position in `targets`. An empty window sends nothing.
pub fn run_sweep(
    targets: &[Target],
    cfg: &TraceConfig,
    pacer: &Pacer<'_>,
    backend: &dyn ProbingBackend,
    sink: &mut dyn TraceSink,
    opts: &SweepOptions,
) -> Result<SweepSummary, SweepError> {
    cfg.validate()?;
    let mut summary = SweepSummary::default();
    if pacer.window().is_empty() || targets.is_empty() {
        return Ok(summary);
    }
    let day = yyyymmdd(
        pacer
            .window()
            .next_open(pacer.clock().now_us())
            .unwrap_or_default()
            .div_euclid(MICROS_PER_SEC),
    );
    let next = AtomicUsize::new(0);
    let stop = AtomicBool::new(false);
    let fatal: Mutex<Option<BackendError>> = Mutex::new(None);
    let (tx, rx) = mpsc::channel::<Option<TraceRecord>>();
    let workers = opts.workers.clamp(1, targets.len());

    let sink_result = std::thread::scope(|scope| {
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, stop, fatal, day) = (&next, &stop, &fatal, &day);
            scope.spawn(move || {
                let cancelled = || opts.cancel.as_ref().is_some_and(|c| c.load(Ordering::SeqCst));
                while !stop.load(Ordering::SeqCst) && !cancelled() {
                    let i = next.fetch_add(1, Ordering::SeqCst);
                    let Some(target) = targets.get(i) else { break };
                    let mut tcfg = cfg.clone();
                    tcfg.flow_id = opts.flows.flow_for(cfg.flow_id, target.addr);
                    let id = format!("{}-{}-{:06}", opts.probe_id, day, i);
                    let msg = match trace(&id, &opts.probe_id, target.addr, &tcfg, backend, pacer) {
                        Ok(rec) => Some(rec),
                        Err(TraceError::Backend(BackendError::Unroutable(why))) => {
                            log::debug!("skipping {}: {why}", target.addr);
                            None
                        }
                        Err(TraceError::Backend(e)) => {
                            fatal.lock().unwrap().get_or_insert(e);
                            stop.store(true, Ordering::SeqCst);
                            break;
                        }
                        Err(TraceError::Window(_)) => break,
                        Err(TraceError::Record(e)) => unreachable!("tracer built an invalid record: {e}"),
                    };
                    if tx.send(msg).is_err() {
                        break;
                    }
                }
            });
        }
        drop(tx);
        let mut written = 0usize;
        for msg in rx {
            match msg {
                Some(rec) => {
                    if let Err(source) = sink.write(&rec) {
                        stop.store(true, Ordering::SeqCst);
                        return Err(SweepError::Sink { written, source });
                    }
                    written += 1;
                    if rec.reached() {
                        summary.reached += 1;
                    } else {
                        summary.unreached += 1;
                    }
                }
                None => summary.failed += 1,
            }
        }
        Ok(())
    });

    if let Err(e) = sink_result {
        if let Err(m) = sink.mark_partial() {
            log::error!("could not write partial-batch marker: {m}");
        }
        return Err(e);
    }
    if let Some(e) = fatal.into_inner().unwrap() {
        return Err(SweepError::Backend(e));
    }
    sink.flush().map_err(|source| SweepError::Sink {
        written: summary.emitted(),
        source,
    })?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prefix::IpPrefix;
    use crate::simnet::{scenario, Simnet, SimnetBackend};
    use crate::targets::TargetMode;

    fn ip(s: &str) -> Ipv4Addr {
        s.parse().unwrap()
    }

    fn linear_backend() -> SimnetBackend {
        SimnetBackend::new(
            Arc::new(Simnet::new(scenario("linear").unwrap()).unwrap()),
            ip("200.87.0.2"),
        )
    }

    fn target(addr: Ipv4Addr) -> Target {
        Target {
            network: IpPrefix::containing(addr, 24),
            addr,
            mode: TargetMode::Random,
        }
    }

    #[test]
    fn three_hop_trace() {
        let clock = VirtualClock::starting_at(1_402_876_800 * MICROS_PER_SEC);
        let pacer = Pacer::new(&clock, DutyWindow::ALWAYS, 20);
        let rec = trace(
            "t",
            "p",
            ip("200.87.2.1"),
            &TraceConfig::default(),
            &linear_backend(),
            &pacer,
        )
        .unwrap();
        assert_eq!(rec.hops().len(), 3);
        assert!(rec.reached());
        assert_eq!(rec.timestamp_utc(), 1_402_876_800);
    }

    #[test]
    fn silent_router_leaves_star() {
        let mut spec = scenario("linear").unwrap();
        spec.nodes
            .iter_mut()
            .find(|n| n.addr == ip("200.87.1.1"))
            .unwrap()
            .responsive = false;
        let backend = SimnetBackend::new(Arc::new(Simnet::new(spec).unwrap()), ip("200.87.0.2"));
        let clock = VirtualClock::starting_at(0);
        let pacer = Pacer::new(&clock, DutyWindow::ALWAYS, 20);
        let rec = trace("t", "p", ip("200.87.2.1"), &TraceConfig::default(), &backend, &pacer).unwrap();
        assert!(rec.hops()[1].is_star());
        assert!(rec.reached());
        // two timed-out attempts at ttl 2 cost two timeouts of virtual time
        assert!(clock.now_us() >= 4_000_000);
    }

    #[test]
    fn gap_limit_stops_silent_destination() {
        let mut spec = scenario("linear").unwrap();
        spec.lans[0].response_permille = 0;
        let backend = SimnetBackend::new(Arc::new(Simnet::new(spec).unwrap()), ip("200.87.0.2"));
        let clock = VirtualClock::starting_at(0);
        let pacer = Pacer::new(&clock, DutyWindow::ALWAYS, 20);
        let rec = trace("t", "p", ip("200.87.3.3"), &TraceConfig::default(), &backend, &pacer).unwrap();
        assert!(!rec.reached());
        assert_eq!(rec.hops().len(), 3 + 5);
        assert!(rec.hops()[3..].iter().all(|h| h.is_star()));
    }

    #[test]
    fn no_replies_at_all() {
        let mut spec = scenario("linear").unwrap();
        for n in &mut spec.nodes {
            n.responsive = false;
        }
        spec.lans[0].response_permille = 0;
        let backend = SimnetBackend::new(Arc::new(Simnet::new(spec).unwrap()), ip("200.87.0.2"));
        let clock = VirtualClock::starting_at(0);
        let pacer = Pacer::new(&clock, DutyWindow::ALWAYS, 20);
        let rec = trace("t", "p", ip("200.87.3.3"), &TraceConfig::default(), &backend, &pacer).unwrap();
        assert!(!rec.reached());
        assert_eq!(rec.responding_count(), 0);
    }

    #[test]
    fn config_validation() {
        assert!(TraceConfig::default().validate().is_ok());
        let cfg = TraceConfig {
            gap_limit: 0,
            ..TraceConfig::default()
        };
        assert_eq!(cfg.validate(), Err(ConfigError("gap_limit")));
    }

    #[test]
    fn window_parsing() {
        assert_eq!(DutyWindow::parse("20h").unwrap(), DutyWindow::default());
        let w = DutyWindow::parse("00:00-00:00").unwrap();
        assert!(w.is_empty());
        let w = DutyWindow::parse("22:00-02:00").unwrap();
        assert_eq!((w.start_secs, w.duration_secs), (22 * 3600, 4 * 3600));
        assert!(w.contains(23 * 3600 * MICROS_PER_SEC));
        assert!(w.contains(SECS_PER_DAY * MICROS_PER_SEC + 3600 * MICROS_PER_SEC));
        assert!(!w.contains(12 * 3600 * MICROS_PER_SEC));
        assert_eq!(
            w.next_open(12 * 3600 * MICROS_PER_SEC),
            Some(22 * 3600 * MICROS_PER_SEC)
        );
        for bad in ["", "25h", "1:00", "24:00-01:00", "ab"] {
            assert!(DutyWindow::parse(bad).is_err(), "{bad}");
        }
    }

    #[test]
    fn pacer_defers_to_window_and_rate() {
        let clock = VirtualClock::starting_at(21 * 3600 * MICROS_PER_SEC);
        let pacer = Pacer::new(&clock, DutyWindow::default(), 2).recording();
        for _ in 0..5 {
            pacer.admit().unwrap();
        }
        let t = pacer.sent_times();
        let day = SECS_PER_DAY * MICROS_PER_SEC;
        assert_eq!(
            t,
            vec![
                day,
                day,
                day + MICROS_PER_SEC,
                day + MICROS_PER_SEC,
                day + 2 * MICROS_PER_SEC
            ]
        );
    }

    #[test]
    fn zero_window_sends_nothing() {
        let clock = VirtualClock::starting_at(0);
        let pacer = Pacer::new(&clock, DutyWindow::parse("00:00-00:00").unwrap(), 20).recording();
        let targets: Vec<Target> = (1..=10).map(|i| target(Ipv4Addr::new(200, 87, 3, i))).collect();
        let mut sink = Vec::new();
        let s = run_sweep(
            &targets,
            &TraceConfig::default(),
            &pacer,
            &linear_backend(),
            &mut sink,
            &SweepOptions::new("p"),
        )
        .unwrap();
        assert_eq!(s, SweepSummary::default());
        assert!(pacer.sent_times().is_empty() && sink.is_empty());
    }

    #[test]
    fn sweep_counts_and_ids() {
        let clock = VirtualClock::starting_at(1_402_876_800 * MICROS_PER_SEC);
        let pacer = Pacer::new(&clock, DutyWindow::default(), 20);
        let mut targets: Vec<Target> = (1..=4).map(|i| target(Ipv4Addr::new(200, 87, 3, i))).collect();
        targets.push(target(ip("8.8.8.8")));
        let mut sink = Vec::new();
        let opts = SweepOptions {
            workers: 3,
            ..SweepOptions::new("lapaz")
        };
        let s = run_sweep(
            &targets,
            &TraceConfig::default(),
            &pacer,
            &linear_backend(),
            &mut sink,
            &opts,
        )
        .unwrap();
        assert_eq!(
            s,
            SweepSummary {
                reached: 4,
                unreached: 0,
                failed: 1
            }
        );
        let mut ids: Vec<&str> = sink.iter().map(|r| r.trace_id()).collect();
        ids.sort();
        assert_eq!(ids[0], "lapaz-20140616-000000");
    }

    struct FailingSink {
        ok: usize,
        partial: bool,
    }

    impl TraceSink for FailingSink {
        fn write(&mut self, _: &TraceRecord) -> std::io::Result<()> {
            if self.ok == 0 {
                return Err(std::io::Error::other("disk full"));
            }
            self.ok -= 1;
            Ok(())
        }

        fn mark_partial(&mut self) -> std::io::Result<()> {
            self.partial = true;
            Ok(())
        }
    }

    #[test]
    fn sink_failure_aborts_with_marker() {
        let clock = VirtualClock::starting_at(0);
        let pacer = Pacer::new(&clock, DutyWindow::ALWAYS, 20);
        let targets: Vec<Target> = (1..=10).map(|i| target(Ipv4Addr::new(200, 87, 3, i))).collect();
        let mut sink = FailingSink { ok: 3, partial: false };
        let err = run_sweep(
            &targets,
            &TraceConfig::default(),
            &pacer,
            &linear_backend(),
            &mut sink,
            &SweepOptions::new("p"),
        )
        .unwrap_err();
        assert!(matches!(err, SweepError::Sink { written: 3, .. }));
        assert!(sink.partial);
    }

    #[test]
    fn daily_file_sink_layout() {
        let dir = tempfile::tempdir().unwrap();
        let mut sink = DailyFileSink::new(dir.path(), "lapaz");
        let rec = |ts| TraceRecord::new("t", "lapaz", ts, ip("1.1.1.1"), ip("2.2.2.2"), 1, vec![Hop::star(1)]).unwrap();
        sink.write(&rec(1_402_876_800)).unwrap();
        sink.write(&rec(1_402_876_801)).unwrap();
        sink.write(&rec(1_402_876_800 + 86_400)).unwrap();
        sink.flush().unwrap();
        let names: Vec<String> = sink
            .files()
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, ["traces-lapaz-20140616.jsonl", "traces-lapaz-20140617.jsonl"]);
        let text = std::fs::read_to_string(&sink.files()[0]).unwrap();
        assert_eq!(text.lines().count(), 2);
        sink.mark_partial().unwrap();
        assert!(dir.path().join("traces-lapaz-20140617.jsonl.partial").exists());
    }

    #[test]
    fn flow_assignment_is_stable_and_nonzero() {
        let f = FlowAssignment::PerDestination { salt: 7 };
        let a = f.flow_for(1, ip("200.87.3.3"));
        assert_eq!(a, f.flow_for(1, ip("200.87.3.3")));
        assert_ne!(a, 0);
        assert_eq!(FlowAssignment::Fixed.flow_for(9, ip("200.87.3.3")), 9);
    }
}
