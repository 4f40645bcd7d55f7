//! Central collector: idempotent batch ingestion into an append-only store, and
//! date-range queries.
//!
//! Layout under `data_dir`:
//!
//! ```text
//! manifest.jsonl                      one committed batch per line
//! segments/<YYYYMMDD>/<batch_id>.jsonl
//! ```
//!
//! A batch is committed when its manifest line is durable. Segment files without a
//! manifest line are leftovers of an interrupted ingest and are removed on open.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classify::ClassifiedTrace;
use crate::record::TraceRecord;

pub mod http;

/// Hex SHA-256 over the records as JSON lines, each terminated by `\n`.
pub fn payload_digest(records: &[TraceRecord]) -> String {
    let mut h = Sha256::new();
    for r in records {
        h.update(r.to_json_line().as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Batch {
    pub batch_id: String,
    pub probe_id: String,
    pub date: String,
    pub records: Vec<TraceRecord>,
    pub checksum: String,
}

impl Batch {
    pub fn new(probe_id: impl Into<String>, date: impl Into<String>, records: Vec<TraceRecord>) -> Self {
        let probe_id = probe_id.into();
        let date = date.into();
        Self {
            batch_id: batch_id_for(&probe_id, &date),
            checksum: payload_digest(&records),
            probe_id,
            date,
            records,
        }
    }
}

pub fn batch_id_for(probe_id: &str, date: &str) -> String {
    format!("{probe_id}-{date}")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Ack {
    Accepted,
    Duplicate,
}

#[derive(Debug, thiserror::Error)]
pub enum CollectorError {
    #[error("checksum mismatch for batch {0}")]
    Checksum(String),
    #[error("invalid batch: {0}")]
    Invalid(String),
    #[error("batch {0} was already committed with different content")]
    Conflict(String),
    #[error("invalid date range {from}..{to}")]
    InvalidRange { from: String, to: String },
    #[error("store is unusable after an injected fault")]
    Poisoned,
    #[error("injected fault at {0:?}")]
    Injected(FaultPoint),
    #[error("store I/O error at {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("corrupt segment {path}: {message}")]
    Corrupt { path: PathBuf, message: String },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CollectorError + '_ {
    move |source| CollectorError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Simulated crash points inside an ingest, for crash-safety tests.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultPoint {
    /// Temporary segment written and synced, not yet renamed.
    AfterSegmentWrite,
    /// Segment in its final place, manifest untouched.
    AfterRename,
    /// Half of the manifest line written.
    MidManifest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
struct ManifestEntry {
    batch_id: String,
    probe_id: String,
    date: String,
    records: usize,
    checksum: String,
}

fn valid_date(d: &str) -> bool {
    d.len() == 8 && d.bytes().all(|b| b.is_ascii_digit()) && chrono::NaiveDate::parse_from_str(d, "%Y%m%d").is_ok()
}

fn valid_probe_id(p: &str) -> bool {
    !p.is_empty()
        && p.len() <= 64
        && p.bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'_' | b'.' | b'-'))
}

/// Append-only trace store. Safe to share between threads.
pub struct Store {
    root: PathBuf,
    manifest: Mutex<File>,
    index: RwLock<BTreeMap<String, ManifestEntry>>,
    partitions: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    fault: Mutex<Option<FaultPoint>>,
    poisoned: std::sync::atomic::AtomicBool,
}

impl std::fmt::Debug for Store {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Store")
            .field("root", &self.root)
            .finish_non_exhaustive()
    }
}

impl Store {
    /// Opens or creates a store, repairing the effects of an interrupted ingest.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, CollectorError> {
        let root = root.into();
        let segments = root.join("segments");
        fs::create_dir_all(&segments).map_err(io_err(&segments))?;
        let manifest_path = root.join("manifest.jsonl");
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(&manifest_path)
            .map_err(io_err(&manifest_path))?;

        let mut index = BTreeMap::new();
        let mut good_len = 0u64;
        {
            let mut reader = BufReader::new(&file);
            let mut line = String::new();
            loop {
                line.clear();
                let n = reader.read_line(&mut line).map_err(io_err(&manifest_path))?;
                if n == 0 || !line.ends_with('\n') {
                    break;
                }
                match serde_json::from_str::<ManifestEntry>(line.trim_end()) {
                    Ok(e) => {
                        index.insert(e.batch_id.clone(), e);
                        good_len += n as u64;
                    }
                    Err(_) => break,
                }
            }
        }
        if file.metadata().map_err(io_err(&manifest_path))?.len() != good_len {
            log::warn!("truncating torn manifest tail in {}", manifest_path.display());
            file.set_len(good_len).map_err(io_err(&manifest_path))?;
            file.sync_all().map_err(io_err(&manifest_path))?;
        }
        file.seek(SeekFrom::End(0)).map_err(io_err(&manifest_path))?;

        // drop segments that never got a manifest line
        for day in fs::read_dir(&segments).map_err(io_err(&segments))? {
            let day = day.map_err(io_err(&segments))?.path();
            if !day.is_dir() {
                continue;
            }
            for seg in fs::read_dir(&day).map_err(io_err(&day))? {
                let seg = seg.map_err(io_err(&day))?.path();
                let committed = seg
                    .file_name()
                    .and_then(|n| n.to_str())
                    .and_then(|n| n.strip_suffix(".jsonl"))
                    .map(|id| index.contains_key(id))
                    .unwrap_or(false);
                if !committed {
                    log::warn!("removing uncommitted segment {}", seg.display());
                    fs::remove_file(&seg).map_err(io_err(&seg))?;
                }
            }
        }

        Ok(Self {
            root,
            manifest: Mutex::new(file),
            index: RwLock::new(index),
            partitions: Mutex::new(HashMap::new()),
            fault: Mutex::new(None),
            poisoned: std::sync::atomic::AtomicBool::new(false),
        })
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    /// Makes the next ingest stop at `point` as if the process died there.
    #[doc(hidden)]
    pub fn inject_fault(&self, point: Option<FaultPoint>) {
        *self.fault.lock().unwrap() = point;
    }

    fn segment_path(&self, date: &str, batch_id: &str) -> PathBuf {
        self.root.join("segments").join(date).join(format!("{batch_id}.jsonl"))
    }

    fn partition_lock(&self, date: &str) -> Arc<Mutex<()>> {
        self.partitions
            .lock()
            .unwrap()
            .entry(date.to_string())
            .or_default()
            .clone()
    }

    fn validate(batch: &Batch) -> Result<(), CollectorError> {
        if !valid_probe_id(&batch.probe_id) {
            return Err(CollectorError::Invalid(format!("bad probe id `{}`", batch.probe_id)));
        }
        if !valid_date(&batch.date) {
            return Err(CollectorError::Invalid(format!("bad date `{}`", batch.date)));
        }
        if batch.batch_id != batch_id_for(&batch.probe_id, &batch.date) {
            return Err(CollectorError::Invalid(format!(
                "batch id `{}` must be `<probe_id>-<date>`",
                batch.batch_id
            )));
        }
        if let Some(r) = batch.records.iter().find(|r| r.probe_id() != batch.probe_id) {
            return Err(CollectorError::Invalid(format!(
                "record {} belongs to probe `{}`",
                r.trace_id(),
                r.probe_id()
            )));
        }
        if payload_digest(&batch.records) != batch.checksum.to_ascii_lowercase() {
            return Err(CollectorError::Checksum(batch.batch_id.clone()));
        }
        Ok(())
    }

    /// Validates and commits a batch; a committed batch id is acknowledged as duplicate.
    pub fn submit(&self, batch: &Batch) -> Result<Ack, CollectorError> {
        if self.poisoned.load(std::sync::atomic::Ordering::SeqCst) {
            return Err(CollectorError::Poisoned);
        }
        Self::validate(batch)?;
        let lock = self.partition_lock(&batch.date);
        let _guard = lock.lock().unwrap();

        if let Some(existing) = self.index.read().unwrap().get(&batch.batch_id) {
            return if existing.checksum == batch.checksum.to_ascii_lowercase() {
                Ok(Ack::Duplicate)
            } else {
                Err(CollectorError::Conflict(batch.batch_id.clone()))
            };
        }
        let fault = self.fault.lock().unwrap().take();
        let crash = |point| -> Result<(), CollectorError> {
            if fault == Some(point) {
                self.poisoned.store(true, std::sync::atomic::Ordering::SeqCst);
                Err(CollectorError::Injected(point))
            } else {
                Ok(())
            }
        };

        let mut records: Vec<&TraceRecord> = batch.records.iter().collect();
        records.sort_by(|a, b| a.trace_id().cmp(b.trace_id()));
        let final_path = self.segment_path(&batch.date, &batch.batch_id);
        let dir = final_path.parent().expect("segment has a parent");
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let tmp = dir.join(format!(".{}.tmp", batch.batch_id));
        {
            let mut f = File::create(&tmp).map_err(io_err(&tmp))?;
            let mut buf = Vec::new();
            for r in &records {
                buf.extend_from_slice(r.to_json_line().as_bytes());
                buf.push(b'\n');
            }
            f.write_all(&buf).map_err(io_err(&tmp))?;
            f.sync_all().map_err(io_err(&tmp))?;
        }
        crash(FaultPoint::AfterSegmentWrite)?;
        fs::rename(&tmp, &final_path).map_err(io_err(&final_path))?;
        crash(FaultPoint::AfterRename)?;

        let entry = ManifestEntry {
            batch_id: batch.batch_id.clone(),
            probe_id: batch.probe_id.clone(),
            date: batch.date.clone(),
            records: batch.records.len(),
            checksum: batch.checksum.to_ascii_lowercase(),
        };
        let mut line = serde_json::to_string(&entry).expect("manifest entry serializes");
        line.push('\n');
        let manifest_path = self.root.join("manifest.jsonl");
        {
            let mut m = self.manifest.lock().unwrap();
            if fault == Some(FaultPoint::MidManifest) {
                let half = line.len() / 2;
                m.write_all(&line.as_bytes()[..half]).map_err(io_err(&manifest_path))?;
                m.sync_all().map_err(io_err(&manifest_path))?;
                crash(FaultPoint::MidManifest)?;
            }
            m.write_all(line.as_bytes()).map_err(io_err(&manifest_path))?;
            m.sync_all().map_err(io_err(&manifest_path))?;
        }
        self.index.write().unwrap().insert(entry.batch_id.clone(), entry);
        Ok(Ack::Accepted)
    }

    /// Committed records with `from <= date <= to` (YYYYMMDD), ordered by
    /// (date, probe_id, trace_id). Segments are read lazily.
    pub fn query_traces(
        &self,
        from: &str,
        to: &str,
        probe: Option<&str>,
    ) -> Result<impl Iterator<Item = Result<TraceRecord, CollectorError>> + '_, CollectorError> {
        if !valid_date(from) || !valid_date(to) || from > to {
            return Err(CollectorError::InvalidRange {
                from: from.to_string(),
                to: to.to_string(),
            });
        }
        let mut entries: Vec<ManifestEntry> = self
            .index
            .read()
            .unwrap()
            .values()
            .filter(|e| e.date.as_str() >= from && e.date.as_str() <= to)
            .filter(|e| probe.is_none_or(|p| p == e.probe_id))
            .cloned()
            .collect();
        entries.sort_by(|a, b| (&a.date, &a.probe_id).cmp(&(&b.date, &b.probe_id)));
        Ok(entries.into_iter().flat_map(move |e| {
            let path = self.segment_path(&e.date, &e.batch_id);
            match read_segment(&path, e.records) {
                Ok(recs) => recs.into_iter().map(Ok).collect::<Vec<_>>(),
                Err(err) => vec![Err(err)],
            }
        }))
    }

    /// Convenience wrapper collecting [`Store::query_traces`].
    pub fn query_all(&self, from: &str, to: &str, probe: Option<&str>) -> Result<Vec<TraceRecord>, CollectorError> {
        self.query_traces(from, to, probe)?.collect()
    }

    pub fn batch_count(&self) -> usize {
        self.index.read().unwrap().len()
    }
}

fn read_segment(path: &Path, expected: usize) -> Result<Vec<TraceRecord>, CollectorError> {
    let file = File::open(path).map_err(io_err(path))?;
    let (records, errors) = crate::record::read_jsonl(BufReader::new(file)).map_err(io_err(path))?;
    if let Some(e) = errors.first() {
        return Err(CollectorError::Corrupt {
            path: path.to_path_buf(),
            message: e.to_string(),
        });
    }
    if records.len() != expected {
        return Err(CollectorError::Corrupt {
            path: path.to_path_buf(),
            message: format!("expected {expected} records, found {}", records.len()),
        });
    }
    Ok(records)
}

/// Concatenates per-probe classified streams in the given order, stamping each trace
/// with its stream's probe id.
pub fn merge_probe_views<I>(streams: I) -> Vec<ClassifiedTrace>
where
    I: IntoIterator<Item = (String, Vec<ClassifiedTrace>)>,
{
    let mut out = Vec::new();
    for (probe, traces) in streams {
        out.extend(traces.into_iter().map(|mut c| {
            if c.trace.probe_id() != probe {
                c.trace = c.trace.with_probe_id(probe.clone());
            }
            c
        }));
    }
    out
}

/// `collector.toml` contents.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CollectorConfig {
    pub listen: String,
    pub data_dir: PathBuf,
    pub tokens: Vec<String>,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigLoadError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("bad collector config {path}: {message}")]
    Parse { path: PathBuf, message: String },
}

impl CollectorConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self, ConfigLoadError> {
        let cfg: Self = toml::from_str(text).map_err(|e| ConfigLoadError::Parse {
            path: origin.to_path_buf(),
            message: e.to_string(),
        })?;
        if cfg.tokens.iter().any(|t| t.trim().is_empty()) {
            return Err(ConfigLoadError::Parse {
                path: origin.to_path_buf(),
                message: "tokens must be non-empty strings".into(),
            });
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigLoadError> {
        let text = fs::read_to_string(path).map_err(|source| ConfigLoadError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text, path)
    }
}
