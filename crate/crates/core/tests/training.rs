use proptest::prelude::*;

use swin_mae::data::synthesize;
use swin_mae::model::{ModelSpec, SwinMae};
use swin_mae::parallel::Parallelism;
use swin_mae::train::pretrain::{epoch_order, loss_csv, pretrain, run_pretraining};
use swin_mae::train::{cosine_lr, TrainConfig};

fn cfg(epochs: usize, par: Parallelism) -> TrainConfig {
    TrainConfig {
        epochs,
        batch_size: 4,
        lr_max: 1e-3,
        weight_decay: 0.0,
        seed: 21,
        parallelism: par,
    }
}

proptest! {
    #[test]
    fn schedule_is_monotone_and_bounded(lr in 1e-6..1.0f64, m in 1usize..100) {
        let mut prev = f64::INFINITY;
        for i in 0..=m {
            let v = cosine_lr(lr, m, i).unwrap();
            prop_assert!((0.0..=lr).contains(&v));
            prop_assert!(v <= prev);
            prev = v;
        }
        prop_assert!(cosine_lr(lr, m, m + 1).is_err());
    }

    #[test]
    fn epoch_order_is_a_permutation(seed in any::<u64>(), epoch in 0usize..50, n in 0usize..40) {
        let mut o = epoch_order(seed, epoch, n);
        prop_assert_eq!(&o, &epoch_order(seed, epoch, n));
        o.sort_unstable();
        prop_assert_eq!(o, (0..n).collect::<Vec<_>>());
    }
}

#[test]
fn loss_falls_over_a_few_epochs() {
    let images = synthesize(16, 0, 32, 21).unlabeled;
    let out = pretrain(SwinMae::new(ModelSpec::default(), 21).unwrap(), &images, &cfg(6, Parallelism::default()), |_, _, _, _| Ok(())).unwrap();
    assert_eq!(out.losses.len(), 6);
    assert!(out.losses[5] < out.losses[0], "{:?}", out.losses);
}

#[test]
fn sequential_and_parallel_agree_bitwise() {
    let images = synthesize(8, 0, 32, 22).unlabeled;
    let run = |par| {
        pretrain(SwinMae::new(ModelSpec::default(), 22).unwrap(), &images, &cfg(2, par), |_, _, _, _| Ok(()))
            .unwrap()
    };
    let (a, b) = (run(Parallelism::Sequential), run(Parallelism::Parallel));
    assert_eq!(
        a.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>(),
        b.losses.iter().map(|l| l.to_bits()).collect::<Vec<_>>()
    );
    assert_eq!(a.model.params, b.model.params);
}

#[test]
fn run_writes_csv_and_periodic_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let images = synthesize(4, 0, 32, 23).unlabeled;
    let out = run_pretraining(
        SwinMae::new(ModelSpec::default(), 23).unwrap(),
        &images,
        &cfg(3, Parallelism::default()),
        1,
        dir.path(),
    )
    .unwrap();
    let csv = std::fs::read_to_string(&out.loss_csv).unwrap();
    assert_eq!(csv, loss_csv(&out.losses));
    assert_eq!(csv.lines().count(), 4);
    assert!(dir.path().join("checkpoint_e1.swmae").exists());
    assert!(dir.path().join("checkpoint_e2.swmae").exists());
    assert!(!dir.path().join("checkpoint_e3.swmae").exists());
    assert!(out.checkpoint.exists());
}

#[test]
fn bad_configs_are_rejected() {
    let images = synthesize(2, 0, 32, 0).unlabeled;
    let m = || SwinMae::new(ModelSpec::default(), 0).unwrap();
    let zero = TrainConfig {
        epochs: 0,
        ..cfg(1, Parallelism::Sequential)
    };
    assert_eq!(pretrain(m(), &images, &zero, |_, _, _, _| Ok(())).err().unwrap().kind(), "config");
    let nan = TrainConfig {
        lr_max: f64::NAN,
        ..cfg(1, Parallelism::Sequential)
    };
    assert!(pretrain(m(), &images, &nan, |_, _, _, _| Ok(())).is_err());
    assert!(pretrain(m(), &[], &cfg(1, Parallelism::Sequential), |_, _, _, _| Ok(())).is_err());
}
