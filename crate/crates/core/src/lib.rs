//! Measurement toolkit for studying how domestic traffic uses an Internet exchange
//! point: target selection, Paris traceroute, route classification, weekly metrics,
//! active-service tracking, a collector, and a deterministic network simulator.

pub mod classify;
pub mod collector;
#[cfg(target_os = "linux")]
pub mod icmp;
pub mod metrics;
pub mod prefix;
pub mod record;
pub mod scope;
pub mod services;
pub mod simnet;
pub mod targets;
pub mod tracer;
mod util;

pub use classify::{classify, classify_batch, classify_records, BatchOutcome, Category, ClassifiedTrace};
pub use collector::{merge_probe_views, Ack, Batch, CollectorConfig, Store};
pub use metrics::{
    box_stats, build_weekly_report, effective_rtt, hop_count, interhop_series, weekly_available_time,
    weekly_local_routes, BoxStats, InterhopSeries, WeekBucket, WeeklyReport,
};
pub use prefix::{load_netblock_file, parse_prefix, IpPrefix};
pub use record::{FlowId, Hop, HopReply, TraceRecord};
pub use scope::{AddressScope, Membership};
pub use services::{ServiceKey, ServiceStore};
pub use simnet::{scenario, Simnet, SimnetBackend, TopologySpec};
pub use targets::{build_target_list, Target, TargetMode};
pub use tracer::{run_sweep, trace, DutyWindow, ProbeReply, ProbingBackend, TraceConfig};
pub use util::{mix64, mix_all};
