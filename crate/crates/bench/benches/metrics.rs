use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use latgeo_core::data::{generate_corpus, SynthConfig};
use latgeo_core::metrics::evaluate;

fn metrics(c: &mut Criterion) {
    let scenes = generate_corpus(500, 0, &SynthConfig::default()).unwrap();
    let ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
    let refs: Vec<Vec<String>> = scenes.iter().map(|s| s.references.clone()).collect();
    // each scene's candidate is its neighbour's first reference
    let cands: Vec<String> = (0..scenes.len()).map(|i| refs[(i + 1) % refs.len()][0].clone()).collect();
    c.bench_function("evaluate_500", |b| b.iter(|| black_box(evaluate(&ids, &cands, &refs))));
}

criterion_group!(benches, metrics);
criterion_main!(benches);
