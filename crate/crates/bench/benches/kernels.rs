use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use psco_core::assignment::sinkhorn;
use psco_core::data::SyntheticSpec;
use psco_core::losses::contrast_loss;
use psco_core::rng::{self, Stream};
use psco_core::trainer::train_step;
use psco_core::{Matrix, MomentumQueue, SinkhornConfig, TrainConfig, Trainer};

fn unit_rows(rows: usize, dim: usize, seed: u64) -> Matrix {
    MomentumQueue::random(rows, dim, seed).unwrap().slots().clone()
}

fn bench_sinkhorn(c: &mut Criterion) {
    let sim = unit_rows(64, 32, 1).matmul_t(&unit_rows(1024, 32, 2)).unwrap();
    let mut group = c.benchmark_group("sinkhorn_64x1024");
    for epsilon in [0.01, 0.05] {
        let cfg = SinkhornConfig {
            epsilon,
            ..SinkhornConfig::default()
        };
        group.bench_function(format!("eps={epsilon}"), |b| b.iter(|| sinkhorn(black_box(&sim), &cfg).unwrap()));
    }
    group.finish();
}

fn bench_contrast_loss(c: &mut Criterion) {
    let q = unit_rows(64, 32, 3);
    let keys = unit_rows(64 + 1024, 32, 4);
    let mut a = Matrix::zeros(64, keys.rows());
    for i in 0..64 {
        a[(i, i)] = 1.0;
    }
    c.bench_function("contrast_loss_64x1088", |b| {
        b.iter(|| contrast_loss(black_box(&q), &keys, &a, 0.2).unwrap())
    });
}

fn bench_train_step(c: &mut Criterion) {
    let spec = SyntheticSpec {
        name: "bench".into(),
        n_classes: 8,
        dim: 32,
        samples_per_class: 64,
        class_mean_scale: 1.0,
        within_class_sigma: 1.0 / 6.0,
        seed: 7,
        sample_seed: None,
        domain_shift: None,
    };
    let data = spec.synthesize().unwrap();
    let cfg = TrainConfig::desk();
    let trainer = Trainer::new(cfg.clone(), data.kind).unwrap();
    let (x, y) = data.batch(&(0..cfg.task.batch_size).collect::<Vec<_>>());
    c.bench_function("train_step_desk", |b| {
        b.iter_batched(
            || trainer.clone(),
            |mut t| {
                let mut r = rng::stream(0, Stream::Step, 0);
                train_step(&x, y.as_deref(), t.kind, &mut t.state, &mut t.optimizer, &mut t.queue, &cfg, 0.03, &mut r)
                    .unwrap()
            },
            criterion::BatchSize::LargeInput,
        )
    });
}

criterion_group!(benches, bench_sinkhorn, bench_contrast_loss, bench_train_step);
criterion_main!(benches);
