use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use viact_core::geometry::extract_patches;
use viact_core::mae::{default_scales, token_cost_profile, MaskPlan};
use viact_core::training::predict_track;
use viact_core::rng;

fn tracking(c: &mut Criterion) {
    let sample = viact_bench::phantom();
    let clip = sample.clip.window(0, 1, 18).unwrap();
    let queries = sample.points.frame(0);
    let model = viact_bench::model(32, 2);
    c.bench_function("track_block_k32_d2", |b| {
        b.iter(|| predict_track(&model, black_box(&clip), &queries, Some(10), 0).unwrap())
    });
}

fn mae_step(c: &mut Criterion) {
    let sample = viact_bench::phantom();
    let clip = sample.clip.window(0, 1, 18).unwrap();
    let pts = sample.points.window(0, 1, 18).unwrap();
    let model = viact_bench::model(32, 2);
    let patches = extract_patches(&clip, &pts, 8).unwrap();
    let plan = MaskPlan::sample(18 * 21, 0.9, &mut rng::stream(0, rng::STREAM_MASK)).unwrap();
    c.bench_function("mae_forward_backward_k32_d2", |b| {
        b.iter(|| {
            let mut s = model.session(true);
            let out = s.mae_forward(&patches, &pts, &plan).unwrap();
            s.backward(out.loss).unwrap()
        })
    });
}

fn profile(c: &mut Criterion) {
    let scales = default_scales();
    c.bench_function("token_cost_profile", |b| {
        b.iter(|| token_cost_profile(black_box(&scales), 224, 224, 0.9).unwrap())
    });
}

criterion_group!(benches, tracking, mae_step, profile);
criterion_main!(benches);
