use std::collections::BTreeSet;
use std::net::Ipv4Addr;
use std::sync::Arc;

use ixpwatch_core::prefix::IpPrefix;
use ixpwatch_core::simnet::{scenario, HostLan, Simnet, SimnetBackend};
use ixpwatch_core::targets::{Target, TargetMode};
use ixpwatch_core::tracer::{
    run_sweep, trace, DutyWindow, Pacer, SweepOptions, SweepSummary, TraceConfig, VirtualClock, MICROS_PER_SEC,
};
use proptest::prelude::*;

fn ip(s: &str) -> Ipv4Addr {
    s.parse().unwrap()
}

fn target(addr: Ipv4Addr) -> Target {
    Target {
        network: IpPrefix::containing(addr, 24),
        addr,
        mode: TargetMode::Random,
    }
}

fn ecmp_backend() -> SimnetBackend {
    let net = Arc::new(Simnet::new(scenario("ecmp").unwrap()).unwrap());
    SimnetBackend::for_site(net, "ecmp").unwrap()
}

fn path_of(flow: u16, dst: Ipv4Addr, backend: &SimnetBackend) -> Vec<Option<Ipv4Addr>> {
    let clock = VirtualClock::starting_at(0);
    let pacer = Pacer::new(&clock, DutyWindow::ALWAYS, 1000);
    let cfg = TraceConfig {
        flow_id: flow,
        ..TraceConfig::default()
    };
    let rec = trace("t", "p", dst, &cfg, backend, &pacer).unwrap();
    rec.hops().iter().map(|h| h.addr()).collect()
}

#[test]
fn fixed_flow_keeps_one_path_and_flows_spread() {
    let backend = ecmp_backend();
    let dst = ip("200.87.5.20");
    let paths: BTreeSet<_> = (0..100).map(|_| path_of(4242, dst, &backend)).collect();
    assert_eq!(paths.len(), 1);
    let spread: BTreeSet<_> = (1..=64).map(|f| path_of(f, dst, &backend)).collect();
    assert!(spread.len() >= 2, "{} paths", spread.len());
}

proptest! {
    #[test]
    fn equal_flow_equal_path(flow in 1u16.., host in 1u8..255, third in 4u8..8) {
        let backend = ecmp_backend();
        let dst = Ipv4Addr::new(200, 87, third, host);
        prop_assert_eq!(path_of(flow, dst, &backend), path_of(flow, dst, &backend));
    }

    #[test]
    fn traces_satisfy_record_invariants(flow in 1u16.., a in any::<u32>(), site in 0usize..2) {
        let spec = scenario("bolivia-like").unwrap();
        let country = spec.country_prefixes.clone();
        let net = Arc::new(Simnet::new(spec).unwrap());
        let probe = net.spec().probes[site].id.clone();
        let backend = SimnetBackend::for_site(net, &probe).unwrap();
        let block = country[a as usize % country.len()];
        let dst = block.nth(a as u64 % block.size()).unwrap();
        let clock = VirtualClock::starting_at(0);
        let pacer = Pacer::new(&clock, DutyWindow::ALWAYS, 20);
        let cfg = TraceConfig { flow_id: flow, ..TraceConfig::default() };
        let rec = trace("t", &probe, dst, &cfg, &backend, &pacer).unwrap();
        // the JSON round trip re-validates everything
        let back: ixpwatch_core::TraceRecord = serde_json::from_str(&rec.to_json_line()).unwrap();
        prop_assert_eq!(&back, &rec);
        let ttls: Vec<u8> = rec.hops().iter().map(|h| h.ttl).collect();
        prop_assert!(ttls.windows(2).all(|w| w[1] == w[0] + 1));
        prop_assert_eq!(rec.reached(), rec.responding().last().map(|(_, r)| r.addr) == Some(dst));
    }
}

#[test]
fn rate_cap_holds_in_every_sliding_second() {
    let net = Arc::new(Simnet::new(scenario("bolivia-like").unwrap()).unwrap());
    let backend = SimnetBackend::for_site(net.clone(), "santacruz").unwrap();
    let targets: Vec<Target> = (0..=255u8).map(|i| target(Ipv4Addr::new(200, 87, i, 77))).collect();
    let clock = VirtualClock::starting_at(1_402_876_800 * MICROS_PER_SEC);
    let cfg = TraceConfig {
        probes_per_second: 7,
        ..TraceConfig::default()
    };
    let pacer = Pacer::new(&clock, DutyWindow::default(), cfg.probes_per_second).recording();
    let opts = SweepOptions {
        workers: 4,
        ..SweepOptions::new("santacruz")
    };
    let mut sink = Vec::new();
    run_sweep(&targets, &cfg, &pacer, &backend, &mut sink, &opts).unwrap();
    let mut sent = pacer.sent_times();
    sent.sort();
    assert!(sent.len() > 1000);
    let n = cfg.probes_per_second as usize;
    for w in sent.windows(n + 1) {
        assert!(w[n] - w[0] >= MICROS_PER_SEC, "{} probes inside one second", n + 1);
    }
}

#[test]
fn probing_stays_inside_duty_window() {
    let net = Arc::new(Simnet::new(scenario("bolivia-like").unwrap()).unwrap());
    let backend = SimnetBackend::for_site(net, "lapaz").unwrap();
    let targets: Vec<Target> = (0..128u8).map(|i| target(Ipv4Addr::new(181, 114, i, 9))).collect();
    let window = DutyWindow::parse("01:00-01:05").unwrap();
    let clock = VirtualClock::starting_at(0);
    let pacer = Pacer::new(&clock, window, 20).recording();
    let mut sink = Vec::new();
    let s = run_sweep(
        &targets,
        &TraceConfig::default(),
        &pacer,
        &backend,
        &mut sink,
        &SweepOptions::new("lapaz"),
    )
    .unwrap();
    assert_eq!(s.emitted(), targets.len());
    let sent = pacer.sent_times();
    // the sweep needs more than one five-minute window
    assert!(sent.iter().any(|&t| t > 86_400 * MICROS_PER_SEC));
    assert!(sent.iter().all(|&t| window.contains(t)));
}

#[test]
fn half_silent_targets() {
    let mut spec = scenario("linear").unwrap();
    spec.lans.push(HostLan {
        prefix: "200.87.4.0/24".parse().unwrap(),
        gateway: ip("200.87.2.1"),
        one_way_delay_us: 1000,
        jitter_us: 0,
        response_permille: 0,
        last_hop_penalty_us: 0,
    });
    let net = Arc::new(Simnet::new(spec).unwrap());
    let backend = SimnetBackend::for_site(net, "linear").unwrap();
    let mut targets: Vec<Target> = (1..=50u8).map(|i| target(Ipv4Addr::new(200, 87, 3, i))).collect();
    targets.extend((1..=50u8).map(|i| target(Ipv4Addr::new(200, 87, 4, i))));
    let clock = VirtualClock::starting_at(0);
    let pacer = Pacer::new(&clock, DutyWindow::default(), 20);
    let mut sink = Vec::new();
    let s = run_sweep(
        &targets,
        &TraceConfig::default(),
        &pacer,
        &backend,
        &mut sink,
        &SweepOptions::new("p"),
    )
    .unwrap();
    assert_eq!(
        s,
        SweepSummary {
            reached: 50,
            unreached: 50,
            failed: 0
        }
    );
    let probed: BTreeSet<Ipv4Addr> = sink.iter().map(|r| r.dst()).collect();
    assert_eq!(probed.len(), 100);
}

#[test]
fn all_responsive_targets_reached() {
    let net = Arc::new(Simnet::new(scenario("linear").unwrap()).unwrap());
    let backend = SimnetBackend::for_site(net, "linear").unwrap();
    let targets: Vec<Target> = (1..=100u8).map(|i| target(Ipv4Addr::new(200, 87, 3, i))).collect();
    let clock = VirtualClock::starting_at(0);
    let pacer = Pacer::new(&clock, DutyWindow::default(), 20);
    let mut sink = Vec::new();
    let s = run_sweep(
        &targets,
        &TraceConfig::default(),
        &pacer,
        &backend,
        &mut sink,
        &SweepOptions::new("p"),
    )
    .unwrap();
    assert_eq!(s.reached, 100);
    assert_eq!(s.emitted(), sink.len());
}
