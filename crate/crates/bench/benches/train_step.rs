use criterion::{criterion_group, criterion_main, BatchSize, BenchmarkId, Criterion};
use equivar_bench::fixture;
use equivar_core::pipeline::train_step;

fn step(c: &mut Criterion) {
    let mut group = c.benchmark_group("train_step");
    group.sample_size(20);
    for s in [1usize, 4, 16] {
        let (trainer, _, batch) = fixture(s);
        group.bench_with_input(BenchmarkId::new("centroids", s), &s, |b, _| {
            b.iter_batched(
                || trainer.model.clone(),
                |mut model| train_step(&mut model, &trainer.optimizer, &batch, &trainer.config, 1e-4).unwrap(),
                BatchSize::LargeInput,
            )
        });
    }
    group.finish();
}

fn full_step(c: &mut Criterion) {
    // batch assembly included
    let mut group = c.benchmark_group("trainer_step");
    group.sample_size(20);
    for s in [1usize, 16] {
        let (trainer, data, _) = fixture(s);
        group.bench_with_input(BenchmarkId::new("centroids", s), &s, |b, _| {
            b.iter_batched(|| trainer.clone(), |mut t| t.step(&data).unwrap(), BatchSize::LargeInput)
        });
    }
    group.finish();
}

criterion_group!(benches, step, full_step);
criterion_main!(benches);
