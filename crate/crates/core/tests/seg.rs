use proptest::prelude::*;

use swin_mae::config::SegOptions;
use swin_mae::data::{synthesize, LabeledSample};
use swin_mae::masking::RngState;
use swin_mae::model::ModelSpec;
use swin_mae::parallel::Parallelism;
use swin_mae::seg::augment::{augment, color_jitter, gaussian_blur, hflip, rotate};
use swin_mae::seg::finetune::metrics_csv_header;
use swin_mae::seg::metrics::{hausdorff, Point};
use swin_mae::seg::{evaluate_predictions, render_table, run_finetune, FinetuneConfig, SwinUnet, SwinUnetSpec};
use swin_mae::tensor::Tensor;
use swin_mae::train::TrainConfig;

fn sample(seed: u64) -> LabeledSample {
    synthesize(0, 1, 32, seed).labeled.remove(0)
}

fn points(max: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec((0..max, 0..max), 1..12)
}

proptest! {
    #[test]
    fn hausdorff_symmetric_and_zero_on_self(a in points(16), b in points(16)) {
        prop_assert_eq!(hausdorff(&a, &b).unwrap(), hausdorff(&b, &a).unwrap());
        prop_assert_eq!(hausdorff(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn augmentation_keeps_ranges(seed in any::<u64>()) {
        let s = sample(seed % 8);
        let a = augment(&s, &mut RngState::new(seed));
        prop_assert_eq!(a.image.shape(), s.image.shape());
        prop_assert_eq!(a.labels.len(), s.labels.len());
        prop_assert!(a.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        prop_assert!(a.labels.iter().all(|&l| l < 3));
        let again = augment(&s, &mut RngState::new(seed));
        prop_assert!(again.image.bit_eq(&a.image));
    }

    #[test]
    fn perfect_predictions_score_one(seed in any::<u64>()) {
        let s = sample(seed % 8);
        let r = evaluate_predictions(&[s.labels.clone()], &[s.labels.clone()], 32, 3).unwrap();
        prop_assert_eq!((r.dsc, r.mpa, r.miou), (1.0, 1.0, 1.0));
        prop_assert!(r.hd == 0.0 || r.hd.is_nan());
    }
}

#[test]
fn flip_twice_and_zero_rotation_are_identity() {
    let s = sample(1);
    assert_eq!(hflip(&hflip(&s)), s);
    let r = rotate(&s, 0.0);
    assert_eq!(r.labels, s.labels);
    assert!(r.image.max_abs_diff(&s.image) < 1e-12);
}

#[test]
fn blur_and_jitter_preserve_flat_images() {
    let flat = Tensor::full(&[3, 8, 8], 0.4);
    assert!(gaussian_blur(&flat, 1.0).max_abs_diff(&flat) < 1e-12);
    assert!(color_jitter(&flat, 1.2, 1.0).max_abs_diff(&flat) < 1e-12);
    let bright = color_jitter(&flat, 1.0, 5.0);
    assert!(bright.data().iter().all(|&v| v == 1.0));
}

#[test]
fn table_and_csv_shapes() {
    let s = sample(2);
    let mut wrong = s.labels.clone();
    wrong.iter_mut().step_by(3).for_each(|v| *v = (*v + 1) % 3);
    let r = evaluate_predictions(&[wrong], &[s.labels], 32, 3).unwrap();
    assert!(r.miou < 1.0);
    let t = render_table(&[("x".into(), &r)]);
    assert!(t.starts_with("Method"));
    assert_eq!(t.lines().count(), 2);
    assert_eq!(r.csv_fields().split(',').count(), 4);
    assert!(r.counts_csv().starts_with("image,class,tp,fp,fn,tn"));
    assert_eq!(r.counts_csv().lines().count(), 1 + 3);
}

#[test]
fn finetune_writes_metrics_and_checkpoints() {
    let dir = tempfile::tempdir().unwrap();
    let data = synthesize(0, 6, 32, 3).labeled;
    let (train, test) = data.split_at(4);
    let net = SwinUnet::new(SwinUnetSpec::new(&ModelSpec::default(), &SegOptions::default()), 3).unwrap();
    let cfg = FinetuneConfig {
        train: TrainConfig {
            epochs: 2,
            batch_size: 2,
            lr_max: 1e-3,
            weight_decay: 0.0,
            seed: 3,
            parallelism: Parallelism::default(),
        },
        augment: true,
    };
    let out = run_finetune(net, train, test, &cfg, dir.path()).unwrap();
    let csv = std::fs::read_to_string(&out.metrics_csv).unwrap();
    assert!(csv.starts_with(metrics_csv_header()));
    assert_eq!(csv.lines().count(), 3);
    assert!(out.best_checkpoint.exists());
    assert!(dir.path().join("last.swunet").exists());
    assert_eq!(out.outcome.history.len(), 2);
    assert!(out.outcome.losses.iter().all(|l| l.is_finite()));
    assert!(run_finetune(out.outcome.last, train, &[], &cfg, dir.path()).is_err());
}
