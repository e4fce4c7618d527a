use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use disparse_bench::{fixture, random_bits, random_scores};
use disparse_core::arbiter::{merge, ArbiterKind};
use disparse_core::engine::{task_scores, top_gamma_mask};
use disparse_core::mask::Mask;
use disparse_core::saliency::{Accumulation, Criterion as Score};

fn forward_backward(c: &mut Criterion) {
    let (model, batches) = fixture(1);
    let batch = &batches[0];
    c.bench_function("forward_backward", |b| {
        b.iter(|| {
            let mut pass = model.masked_forward(None, &batch.x, None).unwrap();
            let loss = pass.multitask_loss(&model.tasks, &batch.targets).unwrap();
            pass.backward(loss).unwrap();
            black_box(pass.loss_value(loss))
        })
    });
}

fn saliency(c: &mut Criterion) {
    let (model, batches) = fixture(8);
    c.bench_function("task_saliency_8_batches", |b| {
        b.iter(|| task_scores(&model, None, Score::Static, black_box(&batches), Accumulation::Signed).unwrap())
    });
}

fn top_gamma(c: &mut Criterion) {
    let mut group = c.benchmark_group("top_gamma");
    for n in [10_000usize, 100_000] {
        let scores = random_scores(n, 7);
        group.bench_with_input(BenchmarkId::from_parameter(n), &scores, |b, s| {
            b.iter(|| top_gamma_mask(black_box(s), s.len() / 10).unwrap())
        });
    }
    group.finish();
}

fn arbiter(c: &mut Criterion) {
    let masks: Vec<Mask> = (0..5).map(|k| Mask::from_bits(random_bits(100_000, k))).collect();
    let refs: Vec<&Mask> = masks.iter().collect();
    c.bench_function("merge_or_5x100k", |b| b.iter(|| merge(black_box(&refs), ArbiterKind::OR).unwrap()));
    c.bench_function("merge_majority_5x100k", |b| {
        b.iter(|| merge(black_box(&refs), ArbiterKind::majority(true)).unwrap())
    });
}

criterion_group!(benches, forward_backward, saliency, top_gamma, arbiter);
criterion_main!(benches);
