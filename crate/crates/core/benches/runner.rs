//! Parallel against sequential execution of preset batches. Without the
//! `parallel` feature both modes run on one thread.

use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use elastic_sim::sim::presets;
use elastic_sim::sim::runner::{run_all, Execution};
use elastic_sim::sim::scenario::Resolved;

fn batch(names: &[&str]) -> Vec<Resolved> {
    let cal = presets::calibration();
    names
        .iter()
        .flat_map(|n| presets::scenario(n).expect("shipped preset").expand())
        .map(|s| s.resolve(&cal).expect("preset resolves"))
        .collect()
}

fn execution_modes(c: &mut Criterion) {
    let batches = [
        (
            "ablation",
            batch(&["ablation-scaleup", "ablation-scaledown"]),
        ),
        ("slo-vs-rps", batch(&["slo-vs-rps"])),
    ];
    let mut g = c.benchmark_group("run_all");
    g.sample_size(10);
    for (name, scenarios) in &batches {
        for (mode, exec) in [
            ("parallel", Execution::Parallel),
            ("sequential", Execution::Sequential),
        ] {
            g.bench_with_input(BenchmarkId::new(mode, name), scenarios, |b, s| {
                b.iter(|| black_box(run_all(s, exec)))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, execution_modes);
criterion_main!(benches);
