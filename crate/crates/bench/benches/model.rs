use contourlm::codec;
use contourlm::model::Group;
use contourlm::training::lm_batch_grads;
use contourlm_bench::{default_model, samples, sft_batch};
use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;

fn bench(c: &mut Criterion) {
    let model = default_model();
    let s = samples(8);
    let batch = sft_batch(&model, &s);
    let mut g = c.benchmark_group("default model");
    g.sample_size(10);
    g.bench_function("forward + backward, 8 sft samples", |b| {
        b.iter(|| lm_batch_grads(black_box(&model), black_box(&batch), &Group::ALL).unwrap())
    });
    let vis = model.vision_tokens(&s[0].image).unwrap();
    g.bench_function("forward, 1 sft sample", |b| b.iter(|| model.forward(black_box(&vis), &batch[0].1.ids).unwrap()));
    let prompt = codec::sft_prompt(&model.config.vocab()).ids;
    let images: Vec<_> = s.iter().map(|x| &x.image).collect();
    g.bench_function("greedy generate, 8 crops x 40 tokens", |b| {
        b.iter(|| model.generate(black_box(&images), &prompt, 40).unwrap())
    });
    g.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
