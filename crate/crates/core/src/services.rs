//! Port-scan history and the active-service set.
//!
//! A service `(addr, port)` is active when it was seen open in at least 3 of the
//! last 5 scan rounds. Rounds are indexed by round id, not calendar day; before
//! five rounds exist the missing ones count as closed.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};
use std::net::Ipv4Addr;

use chrono::DateTime;
use serde::{Deserialize, Serialize};

pub type ServiceKey = (Ipv4Addr, u16);

pub const WINDOW_ROUNDS: u32 = 5;
pub const ACTIVE_THRESHOLD: u32 = 3;
const WINDOW_MASK: u8 = (1 << WINDOW_ROUNDS) - 1;

/// http, ftp, ssh, mail, VoIP, streaming and secured mail.
pub const DEFAULT_PORTS: [u16; 12] = [21, 22, 25, 80, 110, 143, 443, 465, 554, 993, 995, 5060];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScanObservation {
    pub round_id: u64,
    pub ts: i64,
    pub addr: Ipv4Addr,
    pub port: u16,
    #[serde(deserialize_with = "de_bool_flag")]
    pub open: bool,
}

fn de_bool_flag<'de, D: serde::Deserializer<'de>>(d: D) -> Result<bool, D::Error> {
    let s = String::deserialize(d)?;
    match s.trim() {
        "1" | "true" | "TRUE" | "True" => Ok(true),
        "0" | "false" | "FALSE" | "False" => Ok(false),
        other => Err(serde::de::Error::custom(format!("invalid open flag `{other}`"))),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ServiceError {
    #[error("round {got} is not after the last ingested round {last}")]
    OutOfOrder { got: u64, last: u64 },
    #[error("observation for round {got} inside a batch for round {expected}")]
    MixedRounds { expected: u64, got: u64 },
    #[error("duplicate observation for {0}:{1} in round {2}")]
    Duplicate(Ipv4Addr, u16, u64),
    #[error("port 0 is not a valid service port")]
    PortZero,
    #[error("no scan round has been ingested")]
    EmptyStore,
    #[error("scan csv line {line}: {message}")]
    Csv { line: u64, message: String },
}

/// Presence bits for the last five rounds; bit 0 is the most recent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ServiceState {
    pub window: u8,
}

impl ServiceState {
    pub fn active(self) -> bool {
        self.window.count_ones() >= ACTIVE_THRESHOLD
    }
}

/// Per-round snapshot of active counts, kept for the counts series.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoundSummary {
    pub round_id: u64,
    pub ts: i64,
    pub active_per_port: BTreeMap<u16, usize>,
}

/// Single-writer store of service windows.
#[derive(Debug, Clone, Default)]
pub struct ServiceStore {
    states: BTreeMap<ServiceKey, ServiceState>,
    last_round: Option<u64>,
    history: Vec<RoundSummary>,
    ports_seen: BTreeSet<u16>,
}

impl ServiceStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn last_round(&self) -> Option<u64> {
        self.last_round
    }

    pub fn state(&self, key: ServiceKey) -> ServiceState {
        self.states.get(&key).copied().unwrap_or_default()
    }

    pub fn history(&self) -> &[RoundSummary] {
        &self.history
    }

    /// Shifts every window by one round. Pairs not observed open this round record
    /// closed. The store is left untouched on error.
    pub fn ingest_round(
        &mut self,
        round_id: u64,
        ts: i64,
        observations: &[ScanObservation],
    ) -> Result<(), ServiceError> {
        if let Some(last) = self.last_round {
            if round_id <= last {
                return Err(ServiceError::OutOfOrder { got: round_id, last });
            }
        }
        let mut seen = BTreeSet::new();
        let mut open = BTreeSet::new();
        for o in observations {
            if o.round_id != round_id {
                return Err(ServiceError::MixedRounds {
                    expected: round_id,
                    got: o.round_id,
                });
            }
            if o.port == 0 {
                return Err(ServiceError::PortZero);
            }
            if !seen.insert((o.addr, o.port)) {
                return Err(ServiceError::Duplicate(o.addr, o.port, round_id));
            }
            if o.open {
                open.insert((o.addr, o.port));
            }
        }

        for (key, st) in self.states.iter_mut() {
            st.window = (st.window << 1) & WINDOW_MASK;
            if open.contains(key) {
                st.window |= 1;
            }
        }
        for key in &open {
            self.states.entry(*key).or_insert(ServiceState { window: 1 });
            self.ports_seen.insert(key.1);
        }
        self.states.retain(|_, st| st.window != 0);
        self.last_round = Some(round_id);

        let mut active_per_port: BTreeMap<u16, usize> = self.ports_seen.iter().map(|&p| (p, 0)).collect();
        for (key, st) in &self.states {
            if st.active() {
                *active_per_port.entry(key.1).or_default() += 1;
            }
        }
        self.history.push(RoundSummary {
            round_id,
            ts,
            active_per_port,
        });
        Ok(())
    }

    /// Currently active services, optionally for one port.
    pub fn active_set(&self, port: Option<u16>) -> Result<BTreeSet<ServiceKey>, ServiceError> {
        if self.last_round.is_none() {
            return Err(ServiceError::EmptyStore);
        }
        Ok(self
            .states
            .iter()
            .filter(|(k, st)| st.active() && port.is_none_or(|p| k.1 == p))
            .map(|(k, _)| *k)
            .collect())
    }

    /// `(date, port, active_count)` per round and port, chronological.
    pub fn service_counts_series(&self) -> Vec<(String, u16, usize)> {
        let mut rows = Vec::new();
        for round in &self.history {
            let date = DateTime::from_timestamp(round.ts, 0)
                .map(|d| d.format("%Y-%m-%d").to_string())
                .unwrap_or_else(|| round.ts.to_string());
            for (&port, &count) in &round.active_per_port {
                rows.push((date.clone(), port, count));
            }
        }
        rows
    }

    /// Ingests a scan CSV (`round_id,ts,addr,port,open`, header required). Rows are
    /// grouped by round id; rounds must appear in ascending order. A round's timestamp
    /// is the latest `ts` among its rows.
    pub fn ingest_csv<R: Read>(&mut self, reader: R) -> Result<usize, ServiceError> {
        let mut rdr = csv::ReaderBuilder::new()
            .has_headers(true)
            .trim(csv::Trim::All)
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| ServiceError::Csv {
            line: 1,
            message: e.to_string(),
        })?;
        let expected = ["round_id", "ts", "addr", "port", "open"];
        if headers.iter().collect::<Vec<_>>() != expected {
            return Err(ServiceError::Csv {
                line: 1,
                message: format!("expected header {}", expected.join(",")),
            });
        }
        let mut pending: Vec<ScanObservation> = Vec::new();
        let mut rounds = 0;
        for row in rdr.deserialize::<ScanObservation>() {
            let obs = row.map_err(|e| ServiceError::Csv {
                line: e.position().map(|p| p.line()).unwrap_or(0),
                message: e.to_string(),
            })?;
            if let Some(first) = pending.first() {
                if first.round_id != obs.round_id {
                    self.flush_round(&mut pending)?;
                    rounds += 1;
                }
            }
            pending.push(obs);
        }
        if !pending.is_empty() {
            self.flush_round(&mut pending)?;
            rounds += 1;
        }
        Ok(rounds)
    }

    fn flush_round(&mut self, pending: &mut Vec<ScanObservation>) -> Result<(), ServiceError> {
        let round = pending[0].round_id;
        let ts = pending.iter().map(|o| o.ts).max().unwrap_or_default();
        self.ingest_round(round, ts, pending)?;
        pending.clear();
        Ok(())
    }
}

pub fn write_service_counts_csv<W: Write>(out: W, store: &ServiceStore) -> std::io::Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["date", "port", "count"])?;
    for (date, port, count) in store.service_counts_series() {
        w.write_record([date, port.to_string(), count.to_string()])?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;

    const A: Ipv4Addr = Ipv4Addr::new(200, 87, 1, 10);
    const B: Ipv4Addr = Ipv4Addr::new(200, 87, 1, 11);

    fn obs(round: u64, addr: Ipv4Addr, port: u16, open: bool) -> ScanObservation {
        ScanObservation {
            round_id: round,
            ts: 1_400_000_000 + round as i64 * 172_800,
            addr,
            port,
            open,
        }
    }

    /// Feeds five rounds where `pattern` bit (4 - i) says whether the pair is open in round i+1.
    fn store_with_pattern(pattern: u8) -> ServiceStore {
        let mut s = ServiceStore::new();
        for i in 0..5u64 {
            let open = pattern >> (4 - i) & 1 == 1;
            s.ingest_round(i + 1, 0, &[obs(i + 1, A, 80, open)]).unwrap();
        }
        s
    }

    #[test]
    fn three_of_five_examples() {
        assert!(store_with_pattern(0b11100).state((A, 80)).active());
        assert!(!store_with_pattern(0b10001).state((A, 80)).active());
    }

    #[test]
    fn exhaustive_windows() {
        for pattern in 0u8..32 {
            // independent oracle: count opens directly
            let opens = (0..5).filter(|i| pattern >> i & 1 == 1).count();
            let s = store_with_pattern(pattern);
            assert_eq!(s.state((A, 80)).active(), opens >= 3, "pattern {pattern:05b}");
            assert_eq!(s.active_set(None).unwrap().contains(&(A, 80)), opens >= 3);
        }
    }

    #[test]
    fn active_set_filters() {
        let mut s = ServiceStore::new();
        assert_eq!(s.active_set(None), Err(ServiceError::EmptyStore));
        for r in 1..=5 {
            let b_open = r == 1 || r == 5;
            s.ingest_round(
                r,
                0,
                &[obs(r, A, 80, r <= 3), obs(r, B, 22, b_open), obs(r, B, 443, true)],
            )
            .unwrap();
        }
        let all = s.active_set(None).unwrap();
        assert!(all.contains(&(A, 80)));
        assert!(!all.contains(&(B, 22)));
        assert_eq!(
            s.active_set(Some(80)).unwrap().into_iter().collect::<Vec<_>>(),
            vec![(A, 80)]
        );
    }

    #[test]
    fn cold_start_is_inactive() {
        let mut s = ServiceStore::new();
        s.ingest_round(1, 0, &[obs(1, A, 80, true)]).unwrap();
        assert!(s.active_set(None).unwrap().is_empty());
    }

    #[test]
    fn replay_and_bad_batches_leave_state_unchanged() {
        let mut s = ServiceStore::new();
        s.ingest_round(3, 0, &[obs(3, A, 80, true)]).unwrap();
        let before = s.state((A, 80));
        assert_eq!(
            s.ingest_round(3, 0, &[obs(3, A, 80, true)]),
            Err(ServiceError::OutOfOrder { got: 3, last: 3 })
        );
        assert_eq!(
            s.ingest_round(2, 0, &[]),
            Err(ServiceError::OutOfOrder { got: 2, last: 3 })
        );
        assert!(matches!(
            s.ingest_round(4, 0, &[obs(4, A, 80, true), obs(4, A, 80, false)]),
            Err(ServiceError::Duplicate(..))
        ));
        assert!(matches!(
            s.ingest_round(4, 0, &[obs(5, A, 80, true)]),
            Err(ServiceError::MixedRounds { .. })
        ));
        assert_eq!(s.state((A, 80)), before);
        assert_eq!(s.last_round(), Some(3));
        assert_eq!(s.history().len(), 1);
    }

    #[test]
    fn stable_servers_flat_series() {
        let mut s = ServiceStore::new();
        for r in 1..=8u64 {
            let batch: Vec<_> = (0..10)
                .map(|i| obs(r, Ipv4Addr::new(200, 87, 2, i + 1), 80, true))
                .collect();
            s.ingest_round(r, obs(r, A, 80, true).ts, &batch).unwrap();
        }
        let counts: Vec<usize> = s.service_counts_series().iter().map(|r| r.2).collect();
        // windows fill up over the first three rounds
        assert_eq!(counts, vec![0, 0, 10, 10, 10, 10, 10, 10]);
    }

    #[test]
    fn sparse_flapping_server_never_counts() {
        // up one round in three: at most two opens in any five consecutive rounds
        let mut s = ServiceStore::new();
        for r in 1..=20u64 {
            s.ingest_round(r, 0, &[obs(r, A, 80, r % 3 == 0)]).unwrap();
            assert!(!s.state((A, 80)).active());
        }
        assert!(s.service_counts_series().iter().all(|row| row.2 == 0));
        assert!(ServiceStore::new().service_counts_series().is_empty());
    }

    #[test]
    fn alternating_server_follows_popcount() {
        let mut s = ServiceStore::new();
        for r in 1..=20u64 {
            s.ingest_round(r, 0, &[obs(r, A, 80, r % 2 == 0)]).unwrap();
            let opens = (r.saturating_sub(4).max(1)..=r).filter(|x| x % 2 == 0).count();
            assert_eq!(s.state((A, 80)).active(), opens >= 3, "round {r}");
        }
    }

    #[test]
    fn csv_ingest() {
        let text = "round_id,ts,addr,port,open\n\
                    1,1400000000,200.87.1.10,80,1\n1,1400000000,200.87.1.11,80,0\n\
                    2,1400172800,200.87.1.10,80,true\n\
                    3,1400345600,200.87.1.10,80,1\n";
        let mut s = ServiceStore::new();
        assert_eq!(s.ingest_csv(text.as_bytes()).unwrap(), 3);
        assert!(s.state((A, 80)).active());
        let mut out = Vec::new();
        write_service_counts_csv(&mut out, &s).unwrap();
        assert_eq!(
            String::from_utf8(out).unwrap(),
            "date,port,count\n2014-05-13,80,0\n2014-05-15,80,0\n2014-05-17,80,1\n"
        );
    }

    #[test]
    fn csv_requires_header() {
        let mut s = ServiceStore::new();
        assert!(matches!(
            s.ingest_csv("1,0,1.1.1.1,80,1\n".as_bytes()),
            Err(ServiceError::Csv { .. })
        ));
    }

    #[test]
    fn active_flag_invariant_under_random_rounds() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut s = ServiceStore::new();
        let mut prev: Option<BTreeMap<u16, usize>> = None;
        for r in 1..=40u64 {
            let batch: Vec<_> = (0..30u8)
                .map(|i| {
                    obs(
                        r,
                        Ipv4Addr::new(10, 0, 0, i),
                        if i % 2 == 0 { 80 } else { 22 },
                        rng.random_bool(0.6),
                    )
                })
                .collect();
            s.ingest_round(r, 0, &batch).unwrap();
            for (k, st) in &s.states {
                assert_eq!(st.active(), st.window.count_ones() >= 3, "{k:?}");
            }
            let cur = s.history().last().unwrap().active_per_port.clone();
            if let Some(p) = prev {
                for (port, c) in &cur {
                    let before = p.get(port).copied().unwrap_or(0);
                    assert!(c.abs_diff(before) <= batch.len());
                }
            }
            prev = Some(cur);
        }
    }
}
