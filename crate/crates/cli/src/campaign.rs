//! Multi-day probing campaigns: one sweep per probe per day inside the duty window.

use std::net::Ipv4Addr;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;

use anyhow::{anyhow, Context, Result};
use chrono::NaiveDate;
use ixpwatch_core::targets::Target;
use ixpwatch_core::tracer::{
    run_sweep, Clock, DutyWindow, FlowAssignment, Pacer, SweepOptions, SweepSummary, SystemClock, TraceConfig,
    TraceSink, VirtualClock, MICROS_PER_SEC,
};
use ixpwatch_core::{mix_all, ProbingBackend, Simnet, SimnetBackend};

#[derive(Debug, Clone)]
pub struct CampaignPlan {
    pub targets: Vec<Target>,
    pub start: NaiveDate,
    pub days: u32,
    pub window: DutyWindow,
    pub cfg: TraceConfig,
    pub seed: u64,
    pub workers: usize,
}

impl CampaignPlan {
    /// Flow ids change per day and destination so that multipath routes show up
    /// across a week, while staying fixed within one trace.
    pub fn flows_for_day(&self, day: u32) -> FlowAssignment {
        FlowAssignment::PerDestination {
            salt: mix_all(&[self.seed, day as u64]),
        }
    }

    fn day_start_us(&self, day: u32) -> i64 {
        let date = self.start + chrono::Days::new(day as u64);
        date.and_hms_opt(0, 0, 0).expect("midnight").and_utc().timestamp() * MICROS_PER_SEC
    }
}

#[derive(Debug, Clone, Default)]
pub struct CampaignSummary {
    pub per_day: Vec<SweepSummary>,
}

impl CampaignSummary {
    pub fn total(&self) -> SweepSummary {
        self.per_day.iter().fold(SweepSummary::default(), |a, s| SweepSummary {
            reached: a.reached + s.reached,
            unreached: a.unreached + s.unreached,
            failed: a.failed + s.failed,
        })
    }
}

fn run_days(
    plan: &CampaignPlan,
    probe_id: &str,
    clock: &dyn Clock,
    backend: &dyn ProbingBackend,
    sink: &mut dyn TraceSink,
    cancel: Option<Arc<AtomicBool>>,
) -> Result<CampaignSummary> {
    let mut summary = CampaignSummary::default();
    for day in 0..plan.days {
        if cancel
            .as_ref()
            .is_some_and(|c| c.load(std::sync::atomic::Ordering::SeqCst))
        {
            break;
        }
        let opening = plan.window.opening_on_day_of(plan.day_start_us(day));
        clock.sleep_until(opening);
        let pacer = Pacer::new(clock, plan.window, plan.cfg.probes_per_second);
        let opts = SweepOptions {
            workers: plan.workers,
            flows: plan.flows_for_day(day),
            cancel: cancel.clone(),
            ..SweepOptions::new(probe_id)
        };
        let s = run_sweep(&plan.targets, &plan.cfg, &pacer, backend, sink, &opts)
            .with_context(|| format!("sweep for {probe_id} on day {day}"))?;
        log::info!(
            "{probe_id} day {day}: {} reached, {} unreached, {} failed",
            s.reached,
            s.unreached,
            s.failed
        );
        summary.per_day.push(s);
    }
    Ok(summary)
}

/// Runs the plan for one simulated vantage point on a virtual clock.
pub fn run_simulated(
    net: Arc<Simnet>,
    probe_id: &str,
    plan: &CampaignPlan,
    sink: &mut dyn TraceSink,
) -> Result<CampaignSummary> {
    let backend = SimnetBackend::for_site(net.clone(), probe_id).ok_or_else(|| {
        let sites: Vec<&str> = net.spec().probes.iter().map(|p| p.id.as_str()).collect();
        anyhow!(
            "topology has no probe site `{probe_id}` (available: {})",
            sites.join(", ")
        )
    })?;
    let clock = VirtualClock::starting_at(plan.day_start_us(0));
    run_days(plan, probe_id, &clock, &backend, sink, None)
}

/// Runs the plan on the real network in wall-clock time.
pub fn run_real(
    backend: &dyn ProbingBackend,
    probe_id: &str,
    plan: &CampaignPlan,
    sink: &mut dyn TraceSink,
    cancel: Arc<AtomicBool>,
) -> Result<CampaignSummary> {
    run_days(plan, probe_id, &SystemClock, backend, sink, Some(cancel))
}

/// Source address the kernel would pick for outbound traffic.
pub fn default_source_addr() -> Ipv4Addr {
    std::net::UdpSocket::bind("0.0.0.0:0")
        .and_then(|s| {
            s.connect("192.0.2.1:9")?;
            s.local_addr()
        })
        .ok()
        .and_then(|a| match a.ip() {
            std::net::IpAddr::V4(v4) => Some(v4),
            _ => None,
        })
        .unwrap_or(Ipv4Addr::UNSPECIFIED)
}
