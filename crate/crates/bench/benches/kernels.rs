use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::Rng;
use viact_core::geometry::{bilinear_sample, extract_patches};
use viact_core::numerics::{Tape, Tensor};
use viact_core::rng;

fn sampling(c: &mut Criterion) {
    let sample = viact_bench::phantom();
    let mut r = rng::stream(1, "bench");
    let locs: Vec<(f32, f32)> = (0..4096)
        .map(|_| (r.random_range(0.0..127.0), r.random_range(0.0..127.0)))
        .collect();
    c.bench_function("bilinear_sample_4096", |b| {
        let frame = sample.clip.frame(0);
        b.iter(|| locs.iter().map(|&(x, y)| bilinear_sample(frame, x, y)).sum::<f32>())
    });
    let clip = sample.clip.window(0, 1, 18).unwrap();
    let pts = sample.points.window(0, 1, 18).unwrap();
    c.bench_function("extract_patches_18x21_j8", |b| {
        b.iter(|| extract_patches(black_box(&clip), black_box(&pts), 8).unwrap())
    });
}

fn tape_ops(c: &mut Criterion) {
    let mut r = rng::stream(2, "bench");
    let mut rand = |shape: &[usize]| Tensor::from_fn(shape, |_| r.random_range(-1.0f32..1.0));
    let (x, w) = (rand(&[379, 64]), rand(&[64, 256]));
    let (q, k, v) = (rand(&[379, 64]), rand(&[379, 64]), rand(&[379, 64]));
    c.bench_function("linear_379x64x256_fwd_bwd", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let xv = t.leaf(x.clone(), true).unwrap();
            let wv = t.leaf(w.clone(), true).unwrap();
            let y = t.linear(xv, wv, None).unwrap();
            let l = t.mean(y).unwrap();
            t.backward(l).unwrap()
        })
    });
    c.bench_function("attention_379_tokens_2_heads_fwd_bwd", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let qv = t.leaf(q.clone(), true).unwrap();
            let kv = t.leaf(k.clone(), true).unwrap();
            let vv = t.leaf(v.clone(), true).unwrap();
            let a = t.attention(qv, kv, vv, 2).unwrap();
            let l = t.mean(a).unwrap();
            t.backward(l).unwrap()
        })
    });
}

criterion_group!(benches, sampling, tape_ops);
criterion_main!(benches);
