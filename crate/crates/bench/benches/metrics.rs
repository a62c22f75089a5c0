use criterion::{criterion_group, criterion_main, Criterion};
use serval_bench::run_and_qrels;
use serval_core::eval::evaluate_run;
use serval_core::{MetricSpec, MissingQueryPolicy};
use std::hint::black_box;

fn evaluate(c: &mut Criterion) {
    let (runs, qrels) = run_and_qrels(1_000, 100, 5_000, 3);
    let spec = MetricSpec::default();
    c.bench_function("evaluate_run/1000q_depth100", |b| {
        b.iter(|| black_box(evaluate_run(&runs, &qrels, &spec, MissingQueryPolicy::Zero).unwrap()))
    });
}

criterion_group!(benches, evaluate);
criterion_main!(benches);
