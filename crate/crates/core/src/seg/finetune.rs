//! Supervised fine-tuning of a Swin-Unet.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::{model_from_pairs, SegOptions};
use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::masking::RngState;
use crate::model::ModelSpec;
use crate::train::pretrain::{accumulate_mean, as_batch, epoch_order, TrainConfig, AUGMENT_STREAM};
use crate::train::{cosine_lr, Checkpoint};

use super::augment::augment;
use super::eval::{evaluate_segmentation, SegReport};
use super::unet::{SwinUnet, SwinUnetSpec};

#[derive(Debug, Clone, PartialEq)]
pub struct FinetuneConfig {
    pub train: TrainConfig,
    pub augment: bool,
}

pub struct FinetuneOutcome {
    /// Weights after the last epoch.
    pub last: SwinUnet,
    /// Weights of the epoch with the highest test MIoU.
    pub best: SwinUnet,
    pub best_epoch: usize,
    pub losses: Vec<f64>,
    pub history: Vec<SegReport>,
}

/// The training sample for position `i` of `epoch`, augmented if enabled.
pub fn training_sample(s: &LabeledSample, cfg: &FinetuneConfig, epoch: usize, i: usize) -> LabeledSample {
    if !cfg.augment {
        return s.clone();
    }
    let mut rng = RngState::new(cfg.train.seed)
        .split(AUGMENT_STREAM)
        .split(epoch as u64)
        .split(i as u64);
    augment(s, &mut rng)
}

/// Trains with per-pixel cross-entropy, evaluating on `test` after every
/// epoch.
pub fn finetune(
    mut net: SwinUnet,
    train: &[LabeledSample],
    test: &[LabeledSample],
    cfg: &FinetuneConfig,
    mut on_epoch: impl FnMut(usize, f64, &SegReport, &SwinUnet) -> Result<()>,
) -> Result<FinetuneOutcome> {
    cfg.train.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("empty training split"));
    }
    if test.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let par = cfg.train.parallelism;
    let batch_size = cfg.train.batch_size.min(train.len());
    let mut opt = cfg.train.adam();
    let mut best: Option<(f64, usize, SwinUnet)> = None;
    let mut losses = Vec::new();
    let mut history = Vec::new();
    for epoch in 0..cfg.train.epochs {
        let lr = cosine_lr(cfg.train.lr_max, cfg.train.epochs, epoch)?;
        let order = epoch_order(cfg.train.seed, epoch, train.len());
        let (mut sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(batch_size) {
            let results = {
                let n = &net;
                par.map(chunk, |&i| {
                    let s = training_sample(&train[i], cfg, epoch, i);
                    n.loss_and_grads(&as_batch(&s.image)?, &s.labels)
                })
            };
            sum += accumulate_mean(&mut net.params, results)?;
            opt.step(&mut net.params, lr)?;
            batches += 1;
        }
        let loss = sum / batches as f64;
        let report = evaluate_segmentation(&net, test, par)?;
        info!(
            "epoch {} lr {lr:.3e} loss {loss:.6} miou {:.2}%",
            epoch + 1,
            100.0 * report.miou
        );
        if best.as_ref().is_none_or(|b| report.miou > b.0) {
            best = Some((report.miou, epoch, net.clone()));
        }
        on_epoch(epoch, loss, &report, &net)?;
        losses.push(loss);
        history.push(report);
    }
    let (_, best_epoch, best) = best.expect("at least one epoch");
    Ok(FinetuneOutcome {
        last: net,
        best,
        best_epoch,
        losses,
        history,
    })
}

pub fn unet_checkpoint(net: &SwinUnet, epoch: usize) -> Checkpoint {
    let s = &net.spec;
    let mut c = Checkpoint::from_params(&net.params);
    c.set_meta("kind", "swin-unet");
    c.set_meta("image_size", s.image.image_h);
    c.set_meta("channels", s.image.channels);
    c.set_meta("patch_side", s.image.patch_side);
    c.set_meta("embed_dim", s.layout.embed_dim);
    let join = |v: &[usize]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",");
    c.set_meta("depths", join(&s.layout.depths));
    c.set_meta("heads", join(&s.layout.heads));
    c.set_meta("window", s.layout.window);
    c.set_meta("num_classes", s.num_classes);
    c.set_meta("abs_pos_embed", s.use_abs_pos_embed);
    c.set_meta("epoch", epoch);
    c
}

pub fn load_unet(c: &Checkpoint) -> Result<SwinUnet> {
    if c.meta("kind") != Some("swin-unet") {
        return Err(Error::Checkpoint(format!(
            "expected a swin-unet checkpoint, found kind {:?}",
            c.meta("kind")
        )));
    }
    let model: ModelSpec = model_from_pairs(
        ["image_size", "channels", "patch_side", "embed_dim", "depths", "heads", "window"]
            .iter()
            .filter_map(|&k| c.meta(k).map(|v| (k, v))),
    )?;
    let get = |k: &str| c.meta(k).ok_or_else(|| Error::Checkpoint(format!("missing metadata {k}")));
    let seg = SegOptions {
        num_classes: get("num_classes")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad num_classes".into()))?,
        use_abs_pos_embed: get("abs_pos_embed")? == "true",
        ..SegOptions::default()
    };
    let spec = SwinUnetSpec::new(&model, &seg);
    let fresh = SwinUnet::new(spec.clone(), 0)?;
    let params = c.params_where(|_| true)?;
    crate::model::check_same_layout(&fresh.params, &params)?;
    Ok(SwinUnet { spec, params })
}

pub fn metrics_csv_header() -> &'static str {
    "epoch,dsc_pct,mpa_pct,miou_pct,hd\n"
}

pub struct FinetuneArtifacts {
    pub metrics_csv: PathBuf,
    pub best_checkpoint: PathBuf,
    pub outcome: FinetuneOutcome,
}

/// Fine-tunes and writes `metrics.csv` (one row per epoch), `best.swunet`
/// and `last.swunet` into `out_dir`.
pub fn run_finetune(
    net: SwinUnet,
    train: &[LabeledSample],
    test: &[LabeledSample],
    cfg: &FinetuneConfig,
    out_dir: &Path,
) -> Result<FinetuneArtifacts> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("metrics.csv");
    let mut csv = String::from(metrics_csv_header());
    let outcome = finetune(net, train, test, cfg, |epoch, _, report, _| {
        writeln!(csv, "{},{}", epoch + 1, report.csv_fields()).expect("string write");
        fs::write(&csv_path, &csv).map_err(|e| Error::io(&csv_path, e))
    })?;
    let best_path = out_dir.join("best.swunet");
    unet_checkpoint(&outcome.best, outcome.best_epoch + 1).save(&best_path)?;
    unet_checkpoint(&outcome.last, cfg.train.epochs).save(&out_dir.join("last.swunet"))?;
    Ok(FinetuneArtifacts {
        metrics_csv: csv_path,
        best_checkpoint: best_path,
        outcome,
    })
}
