use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use swin_mae::data::synthesize;
use swin_mae::model::{ModelSpec, SwinMae};
use swin_mae::parallel::Parallelism;
use swin_mae::train::pretrain::{as_batch, sample_plan, train_step, TrainConfig};

fn pretrain_step(c: &mut Criterion) {
    let data = synthesize(8, 0, 32, 0);
    let batch: Vec<_> = data.unlabeled.iter().map(|t| as_batch(t).unwrap()).collect();
    let mut group = c.benchmark_group("pretrain_step_b8");
    group.sample_size(10);
    for par in [Parallelism::Sequential, Parallelism::Parallel] {
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 8,
            lr_max: 1e-4,
            weight_decay: 0.0,
            seed: 0,
            parallelism: par,
        };
        let mut model = SwinMae::new(ModelSpec::default(), 0).unwrap();
        let plans: Vec<_> = (0..batch.len()).map(|i| sample_plan(&model, 0, 0, 0, i).unwrap()).collect();
        let mut opt = cfg.adam();
        group.bench_function(BenchmarkId::from_parameter(format!("{par:?}")), |b| {
            b.iter(|| train_step(&mut model, &batch, &plans, &mut opt, cfg.lr_max, par).unwrap())
        });
    }
    group.finish();
}

criterion_group!(benches, pretrain_step);
criterion_main!(benches);
