//! `ixpwatch` command-line front end.
//!
//! Every subcommand is a plain function so integration tests can drive the same
//! code paths as the binary.

use std::collections::{BTreeMap, BTreeSet};
use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::Ipv4Addr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::{anyhow, bail, Context, Result};
use chrono::NaiveDate;
use clap::{Args, Parser, Subcommand};
use ixpwatch_core::classify::ClassifiedTrace;
use ixpwatch_core::metrics::{self, PERCENTILE_METHOD};
use ixpwatch_core::record::{read_jsonl, TraceRecord};
use ixpwatch_core::services::{write_service_counts_csv, ServiceStore};
use ixpwatch_core::simnet::SCENARIOS;
use ixpwatch_core::targets::{targets_for_blocks, write_targets_jsonl, write_targets_text, Target, TargetMode};
use ixpwatch_core::tracer::{DailyFileSink, DutyWindow, TraceConfig};
use ixpwatch_core::{
    classify_records, load_netblock_file, merge_probe_views, AddressScope, Batch, CollectorConfig, IpPrefix, Simnet,
    Store, TopologySpec,
};
use serde::Serialize;

pub mod campaign;
pub mod manifest;

use campaign::{CampaignPlan, CampaignSummary};
use manifest::ManifestBuilder;

#[derive(Debug, Parser)]
#[command(
    name = "ixpwatch",
    version,
    about = "Measure how domestic routes use an Internet exchange point"
)]
pub struct Cli {
    /// Log verbosity (error, warn, info, debug, trace).
    #[arg(long, global = true, default_value = "warn")]
    pub log_level: String,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build the per-/24 target list from country netblocks.
    Targets(TargetsArgs),
    /// Run daily traceroute sweeps over a target list.
    Probe(ProbeArgs),
    /// Classify traces and write them as JSON lines.
    Classify(ClassifyArgs),
    /// Compute every weekly metric CSV from trace files.
    Report(ReportArgs),
    /// Replay a port-scan history and write service counts.
    Services(ServicesArgs),
    /// Run the collector HTTP server.
    Serve(ServeArgs),
    /// Upload trace files to a collector as daily batches.
    Submit(SubmitArgs),
    /// Download traces from a collector.
    Query(QueryArgs),
    /// Write a built-in simulated topology and its address scope files.
    Scenario(ScenarioArgs),
}

#[derive(Debug, Args, Serialize)]
pub struct ScopeArgs {
    /// Netblock file with the country's prefixes.
    #[arg(long)]
    pub country_prefixes: PathBuf,
    /// Netblock file with the IXP peering LAN prefixes.
    #[arg(long)]
    pub ixp_prefixes: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TargetsArgs {
    #[command(flatten)]
    pub scope: ScopeArgs,
    /// Port-scan history CSV (`round_id,ts,addr,port,open`); active services become preferred targets.
    #[arg(long)]
    pub scan_csv: Option<PathBuf>,
    /// Seed for the random fallback choice inside each /24.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output directory for targets.jsonl, targets.txt and manifest.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ProbeArgs {
    /// Targets as JSON lines (from `targets`) or one address per line.
    #[arg(long)]
    pub targets: PathBuf,
    /// `real`, `simnet:<scenario>` or `simnet:<topology.json>`.
    #[arg(long, default_value = "real")]
    pub backend: String,
    /// Vantage point name; for simnet it selects a probe site (default: every site).
    #[arg(long)]
    pub probe_id: Option<String>,
    /// Number of daily sweeps.
    #[arg(long, default_value_t = 1)]
    pub days: u32,
    /// First UTC day of the campaign (default: 2014-06-16 for simnet, today for real).
    #[arg(long)]
    pub start_date: Option<NaiveDate>,
    /// Daily active hours: `<hours>h` from midnight or `HH:MM-HH:MM` (UTC).
    #[arg(long, default_value = "20h")]
    pub window: String,
    /// Seed for per-day flow ids.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Concurrent traces.
    #[arg(long, default_value_t = 1)]
    pub workers: usize,
    #[arg(long, default_value_t = 30)]
    pub max_ttl: u8,
    #[arg(long, default_value_t = 2)]
    pub attempts_per_ttl: u32,
    #[arg(long, default_value_t = 2000)]
    pub per_probe_timeout_ms: u64,
    #[arg(long, default_value_t = 5)]
    pub gap_limit: u32,
    #[arg(long, default_value_t = 20)]
    pub probes_per_second: u32,
    /// Base flow id.
    #[arg(long, default_value_t = 1)]
    pub flow_id: u16,
    /// Output directory for traces-<probe>-<YYYYMMDD>.jsonl files.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ClassifyArgs {
    /// Trace files, or directories holding *.jsonl trace files.
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    #[command(flatten)]
    pub scope: ScopeArgs,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    /// Trace files, or directories holding *.jsonl trace files.
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
    #[command(flatten)]
    pub scope: ScopeArgs,
    /// Port-scan history CSV; adds service_counts.csv.
    #[arg(long)]
    pub scan_history: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServicesArgs {
    /// Port-scan history CSV.
    #[arg(long)]
    pub scan_csv: PathBuf,
    /// Output directory for service_counts.csv and active_services.csv.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ServeArgs {
    /// Collector config (TOML with `listen`, `data_dir`, `tokens`).
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SubmitArgs {
    /// Collector base URL, e.g. http://collector:8080.
    #[arg(long)]
    pub server: String,
    /// Shared probe token.
    #[arg(long, env = "IXPWATCH_TOKEN")]
    #[serde(skip)]
    pub token: String,
    /// Trace files or directories.
    #[arg(required = true)]
    pub traces: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct QueryArgs {
    #[arg(long)]
    pub server: String,
    #[arg(long, env = "IXPWATCH_TOKEN")]
    #[serde(skip)]
    pub token: String,
    /// First day, YYYYMMDD.
    #[arg(long)]
    pub from: String,
    /// Last day, YYYYMMDD.
    #[arg(long)]
    pub to: String,
    #[arg(long)]
    pub probe: Option<String>,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ScenarioArgs {
    /// One of linear, ecmp, bolivia-like, misbehavior.
    #[arg(long)]
    pub scenario: String,
    /// Output directory for topology.json, country.txt and ixp.txt.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses `args` (including the program name) and runs the command.
pub fn run_from_args<I, T>(args: I) -> Result<()>
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let args: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = Cli::try_parse_from(&args)?;
    let line = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    run(cli, line)
}

pub fn run(cli: Cli, command_line: Vec<String>) -> Result<()> {
    match cli.command {
        Command::Targets(a) => cmd_targets(&a, command_line).map(|_| ()),
        Command::Probe(a) => cmd_probe(&a, command_line).map(|_| ()),
        Command::Classify(a) => cmd_classify(&a, command_line),
        Command::Report(a) => cmd_report(&a, command_line),
        Command::Services(a) => cmd_services(&a, command_line),
        Command::Serve(a) => cmd_serve(&a),
        Command::Submit(a) => cmd_submit(&a),
        Command::Query(a) => cmd_query(&a),
        Command::Scenario(a) => cmd_scenario(&a),
    }
}

fn create_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(
        File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn load_scope(scope: &ScopeArgs) -> Result<AddressScope> {
    let country = load_netblock_file(&scope.country_prefixes)?;
    let ixp = load_netblock_file(&scope.ixp_prefixes)?;
    Ok(AddressScope::new(country, ixp)?)
}

fn load_scan_history(path: &Path) -> Result<ServiceStore> {
    let mut store = ServiceStore::new();
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    store
        .ingest_csv(BufReader::new(file))
        .with_context(|| format!("reading {}", path.display()))?;
    Ok(store)
}

pub fn cmd_targets(a: &TargetsArgs, command_line: Vec<String>) -> Result<Vec<Target>> {
    let mut m = ManifestBuilder::start(command_line, a, Some(a.seed));
    let blocks = load_netblock_file(&a.scope.country_prefixes)?;
    if blocks.is_empty() {
        bail!("{} contains no prefixes", a.scope.country_prefixes.display());
    }
    // the IXP file must parse even though targets only come from the country space
    load_scope(&a.scope)?;
    m.input(&a.scope.country_prefixes)?;
    m.input(&a.scope.ixp_prefixes)?;
    let active = match &a.scan_csv {
        Some(p) => {
            m.input(p)?;
            load_scan_history(p)?.active_set(None)?
        }
        None => BTreeSet::new(),
    };
    let targets = targets_for_blocks(&blocks, &active, a.seed);

    fs::create_dir_all(&a.out)?;
    let jsonl = a.out.join("targets.jsonl");
    let txt = a.out.join("targets.txt");
    let mut w = create_file(&jsonl)?;
    write_targets_jsonl(&mut w, &targets)?;
    w.flush()?;
    let mut w = create_file(&txt)?;
    write_targets_text(&mut w, &targets)?;
    w.flush()?;
    m.output(&jsonl);
    m.output(&txt);
    m.finish(&a.out.join("manifest.json"))?;
    let service = targets.iter().filter(|t| t.mode == TargetMode::Service).count();
    eprintln!("{} targets ({} with an active service)", targets.len(), service);
    Ok(targets)
}

/// Reads targets written by `targets`, or a plain address list.
pub fn read_targets(path: &Path) -> Result<Vec<Target>> {
    let file = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        let text = line.trim();
        if text.is_empty() || text.starts_with('#') {
            continue;
        }
        let t = if text.starts_with('{') {
            serde_json::from_str(text).with_context(|| format!("{}:{}: bad target", path.display(), i + 1))?
        } else {
            let addr: Ipv4Addr = text
                .parse()
                .with_context(|| format!("{}:{}: bad address `{text}`", path.display(), i + 1))?;
            Target {
                network: IpPrefix::containing(addr, 24),
                addr,
                mode: TargetMode::Random,
            }
        };
        out.push(t);
    }
    if out.is_empty() {
        bail!("{} contains no targets", path.display());
    }
    Ok(out)
}

/// Loads a named scenario or a topology JSON file.
pub fn load_topology(name: &str) -> Result<TopologySpec> {
    if SCENARIOS.contains(&name) {
        return Ok(ixpwatch_core::scenario(name)?);
    }
    if name.ends_with(".json") {
        let text = fs::read_to_string(name).with_context(|| format!("reading topology {name}"))?;
        return serde_json::from_str(&text).with_context(|| format!("parsing topology {name}"));
    }
    Err(ixpwatch_core::scenario(name).unwrap_err().into())
}

static INTERRUPTED: AtomicBool = AtomicBool::new(false);

extern "C" fn on_sigint(_: libc::c_int) {
    INTERRUPTED.store(true, Ordering::SeqCst);
}

fn watch_interrupt() -> Arc<AtomicBool> {
    unsafe {
        libc::signal(libc::SIGINT, on_sigint as *const () as libc::sighandler_t);
    }
    let flag = Arc::new(AtomicBool::new(false));
    let f = flag.clone();
    std::thread::spawn(move || loop {
        if INTERRUPTED.load(Ordering::SeqCst) {
            f.store(true, Ordering::SeqCst);
            break;
        }
        std::thread::sleep(std::time::Duration::from_millis(100));
    });
    flag
}

pub fn cmd_probe(a: &ProbeArgs, command_line: Vec<String>) -> Result<BTreeMap<String, CampaignSummary>> {
    let mut m = ManifestBuilder::start(command_line, a, Some(a.seed));
    let window = DutyWindow::parse(&a.window)?;
    let cfg = TraceConfig {
        max_ttl: a.max_ttl,
        attempts_per_ttl: a.attempts_per_ttl,
        per_probe_timeout_ms: a.per_probe_timeout_ms,
        flow_id: a.flow_id,
        gap_limit: a.gap_limit,
        probes_per_second: a.probes_per_second,
    };
    cfg.validate()?;
    if a.days == 0 {
        bail!("--days must be at least 1");
    }
    let targets = read_targets(&a.targets)?;
    m.input(&a.targets)?;
    fs::create_dir_all(&a.out)?;

    let simnet = a.backend.strip_prefix("simnet:");
    let start = match (a.start_date, simnet) {
        (Some(d), _) => d,
        (None, Some(_)) => NaiveDate::from_ymd_opt(2014, 6, 16).expect("valid date"),
        (None, None) => chrono::Utc::now().date_naive(),
    };
    let plan = CampaignPlan {
        targets,
        start,
        days: a.days,
        window,
        cfg,
        seed: a.seed,
        workers: a.workers.max(1),
    };

    let mut results = BTreeMap::new();
    let mut outputs = Vec::new();
    if let Some(name) = simnet {
        let spec = load_topology(name)?;
        if Path::new(name).is_file() {
            m.input(Path::new(name))?;
        }
        let net = Arc::new(Simnet::new(spec)?);
        let sites: Vec<String> = match &a.probe_id {
            Some(p) => vec![p.clone()],
            None => net.spec().probes.iter().map(|p| p.id.clone()).collect(),
        };
        if sites.is_empty() {
            bail!("topology `{name}` defines no probe sites");
        }
        for site in sites {
            clear_days(&a.out, &site, &plan)?;
            let mut sink = DailyFileSink::new(&a.out, &site);
            let summary = campaign::run_simulated(net.clone(), &site, &plan, &mut sink)?;
            outputs.extend(sink.files().to_vec());
            results.insert(site, summary);
        }
    } else if a.backend == "real" {
        let probe_id = a.probe_id.clone().unwrap_or_else(|| "probe".to_string());
        let backend = real_backend()?;
        clear_days(&a.out, &probe_id, &plan)?;
        let mut sink = DailyFileSink::new(&a.out, &probe_id);
        let summary = campaign::run_real(backend.as_ref(), &probe_id, &plan, &mut sink, watch_interrupt())?;
        outputs.extend(sink.files().to_vec());
        results.insert(probe_id, summary);
    } else {
        bail!(
            "unknown backend `{}` (expected `real` or `simnet:<scenario>`)",
            a.backend
        );
    }

    for o in &outputs {
        m.output(o);
    }
    m.finish(&a.out.join("manifest.json"))?;
    for (site, s) in &results {
        let t = s.total();
        eprintln!(
            "{site}: {} traces ({} reached, {} unreached, {} unroutable)",
            t.emitted(),
            t.reached,
            t.unreached,
            t.failed
        );
    }
    Ok(results)
}

#[cfg(target_os = "linux")]
fn real_backend() -> Result<Box<dyn ixpwatch_core::ProbingBackend>> {
    let backend = ixpwatch_core::icmp::IcmpBackend::new(campaign::default_source_addr()).map_err(|e| {
        anyhow!(
            "{e}\nrun as root, grant CAP_NET_RAW (setcap cap_net_raw+ep ixpwatch), or use --backend simnet:<scenario>"
        )
    })?;
    Ok(Box::new(backend))
}

#[cfg(not(target_os = "linux"))]
fn real_backend() -> Result<Box<dyn ixpwatch_core::ProbingBackend>> {
    bail!("the real-network backend is only available on Linux; use --backend simnet:<scenario>")
}

/// Removes trace files this campaign is about to write, so reruns do not append.
fn clear_days(out: &Path, probe_id: &str, plan: &CampaignPlan) -> Result<()> {
    for day in 0..plan.days {
        let date = (plan.start + chrono::Days::new(day as u64))
            .format("%Y%m%d")
            .to_string();
        let path = DailyFileSink::path_for(out, probe_id, &date);
        if path.exists() {
            fs::remove_file(&path).with_context(|| format!("removing stale {}", path.display()))?;
        }
    }
    Ok(())
}

/// Expands directories to their `*.jsonl` files, sorted by name.
pub fn expand_trace_inputs(inputs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for p in inputs {
        if p.is_dir() {
            let mut found: Vec<PathBuf> = fs::read_dir(p)
                .with_context(|| format!("listing {}", p.display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .filter(|f| {
                    f.extension().is_some_and(|x| x == "jsonl")
                        && f.file_name()
                            .is_some_and(|n| n.to_string_lossy().starts_with("traces-"))
                })
                .collect();
            found.sort();
            files.extend(found);
        } else {
            files.push(p.clone());
        }
    }
    Ok(files)
}

fn read_trace_files(files: &[PathBuf], m: &mut ManifestBuilder) -> Result<(Vec<TraceRecord>, usize)> {
    let mut records = Vec::new();
    let mut bad = 0;
    for f in files {
        let file = File::open(f).with_context(|| format!("opening {}", f.display()))?;
        let (recs, errors) = read_jsonl(BufReader::new(file))?;
        for e in &errors {
            log::warn!("{}:{}", f.display(), e);
        }
        bad += errors.len();
        records.extend(recs);
        m.input(f)?;
    }
    Ok((records, bad))
}

/// Classifies records and merges them per probe, keeping each probe's input order.
fn classify_merged(records: Vec<TraceRecord>, scope: &AddressScope) -> (Vec<ClassifiedTrace>, usize) {
    let mut per_probe: BTreeMap<String, Vec<TraceRecord>> = BTreeMap::new();
    for r in records {
        per_probe.entry(r.probe_id().to_string()).or_default().push(r);
    }
    let mut rejected = 0;
    let streams: Vec<(String, Vec<ClassifiedTrace>)> = per_probe
        .into_iter()
        .map(|(probe, recs)| {
            let out = classify_records(recs, scope);
            rejected += out.rejected;
            (probe, out.classified)
        })
        .collect();
    (merge_probe_views(streams), rejected)
}

pub fn cmd_classify(a: &ClassifyArgs, command_line: Vec<String>) -> Result<()> {
    let mut m = ManifestBuilder::start(command_line, a, None);
    let scope = load_scope(&a.scope)?;
    m.input(&a.scope.country_prefixes)?;
    m.input(&a.scope.ixp_prefixes)?;
    let files = expand_trace_inputs(&a.traces)?;
    let (records, bad) = read_trace_files(&files, &mut m)?;
    let (classified, rejected) = classify_merged(records, &scope);
    let mut w = create_file(&a.out)?;
    for c in &classified {
        serde_json::to_writer(&mut w, c)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    m.output(&a.out);
    m.finish(&manifest::manifest_path_for(&a.out))?;
    eprintln!(
        "{} classified, {} not reached, {} malformed lines",
        classified.len(),
        rejected,
        bad
    );
    Ok(())
}

pub const REPORT_FILES: [&str; 6] = [
    "hops_weekly.csv",
    "rtt_weekly.csv",
    "local_routes.csv",
    "available_time.csv",
    "interhop.csv",
    "interhop_by_probe.csv",
];

pub fn cmd_report(a: &ReportArgs, command_line: Vec<String>) -> Result<()> {
    let mut m = ManifestBuilder::start(command_line, a, None);
    m.percentile_method(PERCENTILE_METHOD);
    let scope = load_scope(&a.scope)?;
    m.input(&a.scope.country_prefixes)?;
    m.input(&a.scope.ixp_prefixes)?;
    let files = expand_trace_inputs(&a.traces)?;
    let (records, bad) = read_trace_files(&files, &mut m)?;
    let (classified, rejected) = classify_merged(records, &scope);
    if classified.is_empty() {
        bail!(
            "no completed traces in the input ({} not reached, {} malformed lines); nothing to report",
            rejected,
            bad
        );
    }
    let store = match &a.scan_history {
        Some(p) => {
            m.input(p)?;
            Some(load_scan_history(p)?)
        }
        None => None,
    };

    let reports = metrics::build_weekly_report(&classified);
    let series = metrics::interhop_series(&classified, &scope)?;
    fs::create_dir_all(&a.out)?;
    let path = |name: &str| a.out.join(name);
    metrics::write_hops_csv(create_file(&path(REPORT_FILES[0]))?, &reports)?;
    metrics::write_rtt_csv(create_file(&path(REPORT_FILES[1]))?, &reports)?;
    metrics::write_local_routes_csv(create_file(&path(REPORT_FILES[2]))?, &reports)?;
    metrics::write_available_time_csv(create_file(&path(REPORT_FILES[3]))?, &reports)?;
    metrics::write_interhop_csv(create_file(&path(REPORT_FILES[4]))?, &series)?;
    metrics::write_interhop_by_probe_csv(create_file(&path(REPORT_FILES[5]))?, &series)?;
    for name in REPORT_FILES {
        m.output(&path(name));
    }
    if let Some(store) = &store {
        let p = path("service_counts.csv");
        let mut w = create_file(&p)?;
        write_service_counts_csv(&mut w, store)?;
        w.flush()?;
        m.output(&p);
    }
    m.finish(&path("manifest.json"))?;
    eprintln!(
        "{} weeks, {} classified traces, {} not reached, {} negative inter-hop diffs dropped",
        reports.len(),
        classified.len(),
        rejected,
        series.negatives_dropped
    );
    Ok(())
}

pub fn cmd_services(a: &ServicesArgs, command_line: Vec<String>) -> Result<()> {
    let mut m = ManifestBuilder::start(command_line, a, None);
    let store = load_scan_history(&a.scan_csv)?;
    m.input(&a.scan_csv)?;
    fs::create_dir_all(&a.out)?;
    let counts = a.out.join("service_counts.csv");
    let mut w = create_file(&counts)?;
    write_service_counts_csv(&mut w, &store)?;
    w.flush()?;
    let active = a.out.join("active_services.csv");
    let mut w = csv::Writer::from_writer(create_file(&active)?);
    w.write_record(["addr", "port"])?;
    for (addr, port) in store.active_set(None)? {
        w.write_record([addr.to_string(), port.to_string()])?;
    }
    w.flush()?;
    m.output(&counts);
    m.output(&active);
    m.finish(&a.out.join("manifest.json"))?;
    Ok(())
}

pub fn cmd_serve(a: &ServeArgs) -> Result<()> {
    let cfg = CollectorConfig::load(&a.config)?;
    let store = Arc::new(Store::open(&cfg.data_dir)?);
    let rt = tokio::runtime::Runtime::new()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind(&cfg.listen)
            .await
            .with_context(|| format!("binding {}", cfg.listen))?;
        eprintln!("collector listening on {}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        ixpwatch_core::collector::http::serve(listener, store, cfg.tokens, shutdown).await?;
        Ok(())
    })
}

fn agent() -> ureq::Agent {
    ureq::Agent::config_builder().http_status_as_error(false).build().into()
}

/// Groups records into one batch per (probe, UTC day).
pub fn batches_from_records(records: Vec<TraceRecord>) -> Vec<Batch> {
    let mut groups: BTreeMap<(String, String), Vec<TraceRecord>> = BTreeMap::new();
    for r in records {
        let day = ixpwatch_core::tracer::yyyymmdd(r.timestamp_utc());
        groups.entry((r.probe_id().to_string(), day)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((p, d), recs)| Batch::new(p, d, recs))
        .collect()
}

pub fn cmd_submit(a: &SubmitArgs) -> Result<()> {
    let files = expand_trace_inputs(&a.traces)?;
    let mut records = Vec::new();
    for f in &files {
        let (recs, errors) = read_jsonl(BufReader::new(File::open(f)?))?;
        if let Some(e) = errors.first() {
            bail!("{}:{}; refusing to submit a partial batch", f.display(), e);
        }
        records.extend(recs);
    }
    let url = format!("{}/v1/batches", a.server.trim_end_matches('/'));
    let agent = agent();
    for batch in batches_from_records(records) {
        let body = serde_json::to_string(&batch)?;
        let mut resp = agent
            .post(&url)
            .header("Authorization", &format!("Bearer {}", a.token))
            .header("Content-Type", "application/json")
            .send(&body)
            .with_context(|| format!("posting batch {}", batch.batch_id))?;
        let status = resp.status().as_u16();
        let text = resp.body_mut().read_to_string().unwrap_or_default();
        if !(200..300).contains(&status) {
            bail!("batch {} rejected with HTTP {status}: {}", batch.batch_id, text.trim());
        }
        eprintln!("{}: {} records, {}", batch.batch_id, batch.records.len(), text.trim());
    }
    Ok(())
}

pub fn cmd_query(a: &QueryArgs) -> Result<()> {
    let mut url = format!(
        "{}/v1/traces?from={}&to={}",
        a.server.trim_end_matches('/'),
        a.from,
        a.to
    );
    if let Some(p) = &a.probe {
        url.push_str(&format!("&probe={p}"));
    }
    let mut resp = agent()
        .get(&url)
        .header("Authorization", &format!("Bearer {}", a.token))
        .call()
        .with_context(|| format!("querying {url}"))?;
    let status = resp.status().as_u16();
    let text = resp.body_mut().with_config().limit(u64::MAX).read_to_string()?;
    if status != 200 {
        bail!("query failed with HTTP {status}: {}", text.trim());
    }
    fs::write(&a.out, text)?;
    Ok(())
}

fn write_prefixes(path: &Path, header: &str, prefixes: &[IpPrefix]) -> Result<()> {
    let mut w = create_file(path)?;
    writeln!(w, "# {header}")?;
    for p in prefixes {
        writeln!(w, "{p}")?;
    }
    w.flush()?;
    Ok(())
}

pub fn cmd_scenario(a: &ScenarioArgs) -> Result<()> {
    let spec = ixpwatch_core::scenario(&a.scenario)?;
    Simnet::new(spec.clone())?;
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("topology.json"), serde_json::to_string_pretty(&spec)? + "\n")?;
    write_prefixes(
        &a.out.join("country.txt"),
        &format!("{} country prefixes", a.scenario),
        &spec.country_prefixes,
    )?;
    write_prefixes(
        &a.out.join("ixp.txt"),
        &format!("{} IXP prefixes", a.scenario),
        &spec.ixp_prefixes,
    )?;
    Ok(())
}
