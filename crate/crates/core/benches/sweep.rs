use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use sctp_dc::bench::sweep::map_sequential;
use sctp_dc::bench::{run_scenario, Mode, Scenario, ScenarioConfig};

/// One loss-sweep batch: every (drop, mode) pair at a reduced byte target.
fn batch(bytes: &str) -> Vec<ScenarioConfig> {
    let mut base = ScenarioConfig::for_scenario(Scenario::LossSweep);
    base.set("bytes", bytes).expect("valid size");
    let mut out = Vec::new();
    for &drop in &base.drop_list {
        for mode in [Mode::Tcp, Mode::SctpSack, Mode::SctpGbn] {
            let mut c = base.with_mode(mode);
            c.drop_prob = drop;
            out.push(c);
        }
    }
    out
}

fn goodput_sum(reports: Vec<f64>) -> f64 {
    reports.into_iter().sum()
}

fn sweep(c: &mut Criterion) {
    let mut g = c.benchmark_group("loss_sweep_batch");
    g.sample_size(10);
    for bytes in ["256k", "1m"] {
        let jobs = batch(bytes);
        g.bench_with_input(BenchmarkId::new("sequential", bytes), &jobs, |b, jobs| {
            b.iter(|| {
                let r = map_sequential(jobs.clone(), |c| {
                    run_scenario(&c).expect("run").goodput_mbps
                });
                black_box(goodput_sum(r))
            })
        });
        #[cfg(feature = "parallel")]
        g.bench_with_input(BenchmarkId::new("parallel", bytes), &jobs, |b, jobs| {
            b.iter(|| {
                let r = sctp_dc::bench::sweep::map_parallel(jobs.clone(), |c| {
                    run_scenario(&c).expect("run").goodput_mbps
                });
                black_box(goodput_sum(r))
            })
        });
    }
    g.finish();
}

criterion_group!(benches, sweep);
criterion_main!(benches);
