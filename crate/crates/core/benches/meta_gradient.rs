use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mzsr::config::RunConfig;
use mzsr::meta::{meta_gradient, meta_gradient_sequential, sample_task, step_loss_weights, Task};
use mzsr::network::{ArchDescriptor, ModelParams};
use mzsr::synth;

fn setup(task_batch: usize) -> (ModelParams, Vec<Task>, Vec<f64>) {
    let cfg = RunConfig {
        arch: ArchDescriptor::new(3, 8),
        patch: 32,
        task_batch,
        ..Default::default()
    };
    let corpus = synth::corpus(0, 8, 96, 96);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let tasks = (0..task_batch)
        .map(|_| sample_task(&corpus, &cfg, &mut rng).unwrap())
        .collect();
    let params = ModelParams::build(cfg.arch, 0).unwrap();
    (params, tasks, step_loss_weights(0, cfg.unroll_steps, 1))
}

fn bench(c: &mut Criterion) {
    let mut group = c.benchmark_group("meta_gradient");
    group.sample_size(10);
    for batch in [1, 4] {
        let (params, tasks, weights) = setup(batch);
        group.bench_with_input(BenchmarkId::new("sequential", batch), &batch, |b, _| {
            b.iter(|| meta_gradient_sequential(&params, &tasks, 0.01, &weights, false).unwrap())
        });
        // Resolves to the rayon path unless built with --no-default-features.
        group.bench_with_input(BenchmarkId::new("default", batch), &batch, |b, _| {
            b.iter(|| meta_gradient(&params, &tasks, 0.01, &weights, false).unwrap())
        });
        group.bench_with_input(BenchmarkId::new("first_order", batch), &batch, |b, _| {
            b.iter(|| meta_gradient(&params, &tasks, 0.01, &weights, true).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, bench);
criterion_main!(benches);
