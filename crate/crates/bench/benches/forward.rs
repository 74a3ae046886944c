use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use deld_bench::{article, encoder, staged_model, token_ids};
use std::hint::black_box;

fn by_length(c: &mut Criterion) {
    let mut g = c.benchmark_group("encode/length");
    let enc = encoder(2, 256, 0);
    for n in [32, 64, 128, 256] {
        let x = article(n);
        let mask = vec![true; n];
        g.bench_with_input(BenchmarkId::from_parameter(n), &n, |b, _| {
            b.iter(|| enc.encode(black_box(&x), &mask).unwrap())
        });
    }
    g.finish();
}

fn by_depth(c: &mut Criterion) {
    let mut g = c.benchmark_group("encode/layers");
    let x = article(128);
    let mask = vec![true; 128];
    for layers in [1, 2, 4] {
        let enc = encoder(layers, 128, 0);
        g.bench_with_input(BenchmarkId::from_parameter(layers), &layers, |b, _| {
            b.iter(|| enc.encode(black_box(&x), &mask).unwrap())
        });
    }
    g.finish();
}

fn by_stage(c: &mut Criterion) {
    let mut g = c.benchmark_group("predict/stage");
    let ids = token_ids(24);
    for k in [1, 2, 4] {
        let model = staged_model(2, 32, k, 12);
        g.bench_with_input(BenchmarkId::from_parameter(k), &k, |b, _| {
            b.iter(|| model.predict_proba(black_box(&ids)).unwrap())
        });
    }
    g.finish();
}

criterion_group!(benches, by_length, by_depth, by_stage);
criterion_main!(benches);
