use contourlm::geometry::{canonicalize, polygon_iou};
use contourlm_bench::samples;
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn bench(c: &mut Criterion) {
    let s = samples(2);
    let (a, b) = (&s[0].gt, &s[1].gt);
    c.bench_function("polygon_iou supersample 4", |bch| bch.iter(|| polygon_iou(black_box(a), black_box(b), 4).unwrap()));
    let rev = a.reversed();
    c.bench_function("canonicalize", |bch| bch.iter(|| canonicalize(black_box(&rev)).unwrap()));
}

criterion_group!(benches, bench);
criterion_main!(benches);
