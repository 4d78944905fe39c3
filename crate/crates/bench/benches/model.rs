use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use latgeo_bench::fixture;
use latgeo_core::decode::{beam_caption, greedy_caption};
use latgeo_core::numeric::Graph;
use latgeo_core::training::xe_loss;

fn model(c: &mut Criterion) {
    let fx = fixture(4, 3);
    let scene = &fx.prepared[0];
    let segs: Vec<&[usize]> = fx.refs.iter().map(|r| &r[..r.len() - 1]).collect();
    let targets: Vec<usize> = fx.refs.iter().flat_map(|r| r[1..].iter().copied()).collect();

    c.bench_function("encode", |b| {
        b.iter(|| {
            let mut g = Graph::new();
            black_box(fx.model.encode(&mut g, scene).unwrap());
        })
    });
    c.bench_function("xe_step_5_refs", |b| {
        let mut m = fx.model.clone();
        b.iter(|| {
            let mut g = Graph::new();
            let enc = m.encode(&mut g, scene).unwrap();
            let logits = m.decode(&mut g, &enc, &segs).unwrap();
            let loss = xe_loss(&mut g, logits, &targets, 0.1).unwrap();
            g.backward(loss).unwrap();
            m.params.accumulate(&g, 1.0);
        })
    });
    c.bench_function("greedy_decode", |b| b.iter(|| black_box(greedy_caption(&fx.model, scene).unwrap())));
    let mut group = c.benchmark_group("beam_decode");
    group.sample_size(10);
    group.bench_function("k5", |b| b.iter(|| black_box(beam_caption(&fx.model, scene, 5).unwrap())));
    group.finish();
}

criterion_group!(benches, model);
criterion_main!(benches);
