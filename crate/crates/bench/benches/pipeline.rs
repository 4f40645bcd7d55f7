use std::hint::black_box;
use std::net::Ipv4Addr;
use std::sync::Arc;

use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion, Throughput};
use ixpwatch_bench::{bolivia_scope, synthetic_traces};
use ixpwatch_core::tracer::{trace, DutyWindow, Pacer, VirtualClock};
use ixpwatch_core::{
    box_stats, build_weekly_report, classify_records, interhop_series, mix64, scenario, Simnet, SimnetBackend,
    TraceConfig,
};

fn membership(c: &mut Criterion) {
    let scope = bolivia_scope();
    let addrs: Vec<Ipv4Addr> = (0..4096u64).map(|i| Ipv4Addr::from(mix64(i) as u32)).collect();
    let mut g = c.benchmark_group("membership");
    g.throughput(Throughput::Elements(addrs.len() as u64));
    g.bench_function("random_addrs", |b| {
        b.iter(|| {
            addrs
                .iter()
                .map(|&a| scope.membership(black_box(a)) as u8 as u32)
                .sum::<u32>()
        })
    });
    g.finish();
}

fn classify(c: &mut Criterion) {
    let scope = bolivia_scope();
    let traces = synthetic_traces(10_000);
    let mut g = c.benchmark_group("classify");
    g.throughput(Throughput::Elements(traces.len() as u64));
    g.bench_function("10k_traces", |b| {
        b.iter_batched(
            || traces.clone(),
            |t| classify_records(t, &scope),
            BatchSize::LargeInput,
        )
    });
    g.finish();

    let classified = classify_records(traces, &scope).classified;
    let mut g = c.benchmark_group("metrics");
    g.bench_function("weekly_report_10k", |b| {
        b.iter(|| build_weekly_report(black_box(&classified)))
    });
    g.bench_function("interhop_10k", |b| {
        b.iter(|| interhop_series(black_box(&classified), &scope).unwrap())
    });
    g.finish();
}

fn box_plot(c: &mut Criterion) {
    let mut g = c.benchmark_group("box_stats");
    for n in [100usize, 10_000, 1_000_000] {
        let v: Vec<f64> = (0..n as u64).map(|i| (mix64(i) % 200_000) as f64).collect();
        g.throughput(Throughput::Elements(n as u64));
        g.bench_with_input(BenchmarkId::from_parameter(n), &v, |b, v| {
            b.iter(|| box_stats(v).unwrap())
        });
    }
    g.finish();
}

fn simnet_trace(c: &mut Criterion) {
    let net = Arc::new(Simnet::new(scenario("bolivia-like").unwrap()).unwrap());
    let backend = SimnetBackend::for_site(net, "lapaz").unwrap();
    let cfg = TraceConfig::default();
    let clock = VirtualClock::starting_at(0);
    let pacer = Pacer::new(&clock, DutyWindow::ALWAYS, 1_000_000);
    let mut i = 0u64;
    c.bench_function("simnet_trace/bolivia_like", |b| {
        b.iter(|| {
            i += 1;
            let dst = Ipv4Addr::new(200, 87, (i % 256) as u8, (mix64(i) % 254 + 1) as u8);
            trace("t", "lapaz", dst, &cfg, &backend, &pacer).unwrap()
        })
    });
}

criterion_group!(benches, membership, classify, box_plot, simnet_trace);
criterion_main!(benches);
