//! Masked-reconstruction pretraining loop.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::config::model_pairs;
use crate::error::{Error, Result};
use crate::masking::{MaskPlan, RngState};
use crate::model::vit_mae::VitMae;
use crate::model::SwinMae;
use crate::parallel::Parallelism;
use crate::tensor::{Gradients, ParamStore, Tensor};

use super::checkpoint::Checkpoint;
use super::optim::{Adam, AdamConfig};
use super::schedule::cosine_lr;

/// RNG streams split off the run seed.
pub const SHUFFLE_STREAM: u64 = 1;
pub const PLAN_STREAM: u64 = 2;
pub const AUGMENT_STREAM: u64 = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub parallelism: Parallelism,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        cosine_lr(self.lr_max, self.epochs, 0).map(|_| ())
    }

    pub fn adam(&self) -> Adam {
        Adam::new(AdamConfig {
            weight_decay: self.weight_decay,
            ..AdamConfig::default()
        })
    }
}

/// A model trained by masked reconstruction.
pub trait MaskedModel: Sync {
    fn params_mut(&mut self) -> &mut ParamStore;
    fn plan(&self, rng: &mut RngState) -> Result<MaskPlan>;
    fn loss_and_grads(&self, image: &Tensor, plan: &MaskPlan) -> Result<(f64, Gradients)>;
}

impl MaskedModel for SwinMae {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn plan(&self, rng: &mut RngState) -> Result<MaskPlan> {
        SwinMae::plan(self, rng)
    }
    fn loss_and_grads(&self, image: &Tensor, plan: &MaskPlan) -> Result<(f64, Gradients)> {
        SwinMae::loss_and_grads(self, image, plan)
    }
}

impl MaskedModel for VitMae {
    fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }
    fn plan(&self, rng: &mut RngState) -> Result<MaskPlan> {
        VitMae::plan(self, rng)
    }
    fn loss_and_grads(&self, image: &Tensor, plan: &MaskPlan) -> Result<(f64, Gradients)> {
        VitMae::loss_and_grads(self, image, plan)
    }
}

/// Sums per-sample gradients in sample order, averages them into the
/// parameters' grad slots and returns the mean loss.
pub fn accumulate_mean(params: &mut ParamStore, results: Vec<Result<(f64, Gradients)>>) -> Result<f64> {
    let n = results.len();
    if n == 0 {
        return Err(Error::invalid("empty batch"));
    }
    params.zero_grad();
    let mut total = 0.0;
    for r in results {
        let (loss, grads) = r?;
        if !loss.is_finite() {
            return Err(Error::NonFinite { op: "loss" });
        }
        total += loss;
        params.accumulate(&grads)?;
    }
    params.scale_grads(1.0 / n as f64);
    Ok(total / n as f64)
}

/// One optimization step over a batch of `[1, C, H, W]` images, each with
/// its own plan.
pub fn train_step<M: MaskedModel>(
    model: &mut M,
    batch: &[Tensor],
    plans: &[MaskPlan],
    opt: &mut Adam,
    lr: f64,
    par: Parallelism,
) -> Result<f64> {
    if batch.len() != plans.len() {
        return Err(Error::invalid(format!("{} images vs {} plans", batch.len(), plans.len())));
    }
    let results = {
        let m = &*model;
        par.map_range(batch.len(), |i| m.loss_and_grads(&batch[i], &plans[i]))
    };
    let loss = accumulate_mean(model.params_mut(), results).map_err(|e| match e {
        Error::NonFinite { .. } => Error::InvalidArgument(format!("non-finite loss at lr {lr}: {e}")),
        e => e,
    })?;
    opt.step(model.params_mut(), lr)?;
    Ok(loss)
}

/// Deterministic permutation of `0..n` for one epoch.
pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = RngState::new(seed).split(SHUFFLE_STREAM).split(epoch as u64);
    idx.shuffle(rng.rng());
    idx
}

/// Plan for sample `i` of batch `b` in `epoch`.
pub fn sample_plan<M: MaskedModel>(model: &M, seed: u64, epoch: usize, b: usize, i: usize) -> Result<MaskPlan> {
    let mut rng = RngState::new(seed).split(PLAN_STREAM).for_batch(epoch, b).split(i as u64);
    model.plan(&mut rng)
}

pub struct PretrainOutcome<M> {
    pub model: M,
    pub optimizer: Adam,
    /// Mean batch loss per epoch.
    pub losses: Vec<f64>,
}

/// Trains on `images` (each `[C, H, W]`), calling `on_epoch` after every
/// epoch.
pub fn pretrain<M: MaskedModel>(
    mut model: M,
    images: &[Tensor],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64, &M, &Adam) -> Result<()>,
) -> Result<PretrainOutcome<M>> {
    cfg.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("no training images"));
    }
    let batch_size = cfg.batch_size.min(images.len());
    let mut opt = cfg.adam();
    let mut losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(cfg.lr_max, cfg.epochs, epoch)?;
        let order = epoch_order(cfg.seed, epoch, images.len());
        let mut sum = 0.0;
        let mut batches = 0;
        for (b, chunk) in order.chunks(batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| as_batch(&images[i]))
                .collect::<Result<Vec<_>>>()?;
            let plans = (0..chunk.len())
                .map(|i| sample_plan(&model, cfg.seed, epoch, b, i))
                .collect::<Result<Vec<_>>>()?;
            sum += train_step(&mut model, &batch, &plans, &mut opt, lr, cfg.parallelism)?;
            batches += 1;
        }
        let loss = sum / batches as f64;
        info!("epoch {} lr {lr:.3e} loss {loss:.6}", epoch + 1);
        losses.push(loss);
        on_epoch(epoch, loss, &model, &opt)?;
    }
    Ok(PretrainOutcome {
        model,
        optimizer: opt,
        losses,
    })
}

/// `[C, H, W]` → `[1, C, H, W]`.
pub fn as_batch(image: &Tensor) -> Result<Tensor> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.clone().reshape(&shape)
}

/// Checkpoint of an autoencoder with its optimizer state.
pub fn mae_checkpoint(model: &SwinMae, opt: Option<&Adam>, epoch: usize, seed: u64) -> Checkpoint {
    let mut c = Checkpoint::from_params(&model.params);
    c.set_meta("kind", "swin-mae");
    for (k, v) in model_pairs(&model.spec) {
        c.set_meta(k, v);
    }
    c.set_meta("epoch", epoch);
    c.set_meta("seed", seed);
    if let Some(opt) = opt {
        c.set_meta("optim.step", opt.step);
        for (name, t) in opt.state_tensors() {
            c.insert(name, t, crate::tensor::DType::F64);
        }
    }
    c
}

/// Restores an autoencoder from a checkpoint, strictly.
pub fn load_mae(c: &Checkpoint) -> Result<SwinMae> {
    if c.meta("kind") != Some("swin-mae") {
        return Err(Error::Checkpoint(format!(
            "expected a swin-mae checkpoint, found kind {:?}",
            c.meta("kind")
        )));
    }
    let spec = crate::config::model_from_pairs(c.metadata.iter().map(|(k, v)| (k.as_str(), v.as_str())))?;
    let params = c.params_where(|n| !n.starts_with("optim."))?;
    SwinMae::from_params(spec, params)
}

/// Files written by [`run_pretraining`].
pub struct PretrainArtifacts {
    pub loss_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub losses: Vec<f64>,
    pub model: SwinMae,
}

pub fn loss_csv(losses: &[f64]) -> String {
    let mut s = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        writeln!(s, "{},{l}", i + 1).expect("string write");
    }
    s
}

/// Pretrains and writes `loss.csv`, `checkpoint.swmae` and, every
/// `checkpoint_every` epochs, `checkpoint_e{epoch}.swmae` into `out_dir`.
pub fn run_pretraining(
    model: SwinMae,
    images: &[Tensor],
    cfg: &TrainConfig,
    checkpoint_every: usize,
    out_dir: &Path,
) -> Result<PretrainArtifacts> {
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let loss_path = out_dir.join("loss.csv");
    let mut losses = Vec::new();
    let out = pretrain(model, images, cfg, |epoch, loss, m, opt| {
        losses.push(loss);
        fs::write(&loss_path, loss_csv(&losses)).map_err(|e| Error::io(&loss_path, e))?;
        if checkpoint_every > 0 && (epoch + 1) % checkpoint_every == 0 && epoch + 1 < cfg.epochs {
            let p = out_dir.join(format!("checkpoint_e{}.swmae", epoch + 1));
            mae_checkpoint(m, Some(opt), epoch + 1, cfg.seed).save(&p)?;
        }
        Ok(())
    })?;
    let ckpt = out_dir.join("checkpoint.swmae");
    mae_checkpoint(&out.model, Some(&out.optimizer), cfg.epochs, cfg.seed).save(&ckpt)?;
    Ok(PretrainArtifacts {
        loss_csv: loss_path,
        checkpoint: ckpt,
        losses: out.losses,
        model: out.model,
    })
}
