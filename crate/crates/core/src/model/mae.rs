//! The masked autoencoder: parameters, forward pass and reconstruction loss.

use crate::error::{Error, Result};
use crate::masking::{build_mask_plan, MaskPlan, RngState};
use crate::tensor::{grad_check_sampled, ParamStore, Tape, Tensor, Var, GRAD_STEP};

use super::decoder::{decoder_forward, init_decoder};
use super::encoder::{encoder_forward, init_encoder};
use super::layers::Init;
use super::recon::{normalize_patches, reconstruct_image, upscale_nearest};
use super::spec::{EncoderVariant, Geometry, ModelSpec};

#[derive(Debug, Clone)]
pub struct SwinMae {
    pub spec: ModelSpec,
    pub geometry: Geometry,
    pub params: ParamStore,
}

/// Result of one forward pass.
pub struct Forward {
    pub loss: Var,
    /// Reconstruction at the encoder's input size, `[B, C, H, W]`.
    pub recon: Var,
    /// Per-element mask (true = hidden) over the reconstruction.
    pub pixel_mask: Vec<bool>,
}

impl SwinMae {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let geometry = spec.geometry()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        init_encoder(&mut init, &spec, &geometry)?;
        init_decoder(&mut init, &spec, &geometry)?;
        Ok(SwinMae { spec, geometry, params })
    }

    /// Rebuilds a model around stored parameters; the name and shape sets
    /// must match a fresh model exactly.
    pub fn from_params(spec: ModelSpec, params: ParamStore) -> Result<Self> {
        let fresh = SwinMae::new(spec, 0)?;
        check_same_layout(&fresh.params, &params)?;
        Ok(SwinMae { params, ..fresh })
    }

    /// Image as the encoder sees it (doubled for variant II).
    pub fn prepare_input(&self, image: &Tensor) -> Result<Tensor> {
        let s = self.spec.image;
        match *image.shape() {
            [_, c, h, w] if c == s.channels && h == s.image_h && w == s.image_w => {}
            ref sh => {
                return Err(Error::shape(
                    "model_input",
                    format!("image {sh:?} vs [B, {}, {}, {}]", s.channels, s.image_h, s.image_w),
                ))
            }
        }
        if self.spec.encoder_variant == EncoderVariant::II {
            upscale_nearest(image, 2)
        } else {
            Ok(image.clone())
        }
    }

    /// A fresh plan for the encoder's token grid.
    pub fn plan(&self, rng: &mut RngState) -> Result<MaskPlan> {
        build_mask_plan(
            self.geometry.d,
            self.spec.mask_window_r,
            self.spec.mask_ratio,
            rng,
            self.spec.mask_mode,
        )
    }

    /// Reconstruction `[B, C, H, W]` of `input` (already prepared).
    pub fn reconstruct(&self, tape: &mut Tape<'_>, input: Var, plan: &MaskPlan) -> Result<Var> {
        let enc = encoder_forward(tape, &self.spec, &self.geometry, input, plan)?;
        let tokens = decoder_forward(tape, &self.spec, &self.geometry, &enc, plan)?;
        reconstruct_image(tape, tokens, &self.geometry.recon)
    }

    /// Forward pass and masked reconstruction loss for a raw image batch.
    pub fn forward(&self, tape: &mut Tape<'_>, image: &Tensor, plan: &MaskPlan) -> Result<Forward> {
        let input = self.prepare_input(image)?;
        let target = if self.spec.norm_pix {
            normalize_patches(&input, &self.geometry.recon)?
        } else {
            input.clone()
        };
        let batch = input.shape()[0];
        let x = tape.constant(input);
        let recon = self.reconstruct(tape, x, plan)?;
        let per_image = plan.pixel_mask(self.geometry.input.patch_side, self.geometry.input.channels);
        let pixel_mask: Vec<bool> = per_image.iter().copied().cycle().take(per_image.len() * batch).collect();
        let loss = tape.masked_mse(recon, &target, &pixel_mask)?;
        Ok(Forward { loss, recon, pixel_mask })
    }

    /// Loss value and parameter gradients for one image batch.
    pub fn loss_and_grads(&self, image: &Tensor, plan: &MaskPlan) -> Result<(f64, crate::tensor::Gradients)> {
        let mut tape = Tape::with_params(&self.params);
        let f = self.forward(&mut tape, image, plan)?;
        let loss = tape.value(f.loss).item()?;
        Ok((loss, tape.backward(f.loss)?))
    }

    /// Reconstruction as a value, `[B, C, H, W]` at the encoder's input size.
    pub fn reconstruct_value(&self, image: &Tensor, plan: &MaskPlan) -> Result<Tensor> {
        let mut tape = Tape::with_params(&self.params);
        let x = tape.constant(self.prepare_input(image)?);
        let recon = self.reconstruct(&mut tape, x, plan)?;
        Ok(tape.value(recon).clone())
    }

    /// Finite-difference check of the loss gradient with respect to every
    /// parameter tensor, at up to `per_param` evenly spaced coordinates each.
    /// Returns the worst relative error.
    pub fn grad_check(&self, image: &Tensor, plan: &MaskPlan, per_param: usize) -> Result<f64> {
        let mut worst = 0.0f64;
        for (name, p) in self.params.iter() {
            let n = p.value.len();
            let k = per_param.min(n).max(1);
            let coords: Vec<usize> = (0..k).map(|i| i * n / k).collect();
            let err = grad_check_sampled(
                Some(&self.params),
                |tape, v| {
                    tape.bind_param(name, v);
                    let f = self.forward(tape, image, plan)?;
                    Ok(f.loss)
                },
                &p.value,
                GRAD_STEP,
                Some(&coords),
            )?;
            worst = worst.max(err);
        }
        Ok(worst)
    }

    /// Parameter names belonging to the encoder.
    pub fn encoder_names(&self) -> impl Iterator<Item = &str> {
        self.params.names().filter(|n| !n.starts_with("decoder."))
    }
}

/// Errors unless both stores hold the same names with the same shapes.
pub fn check_same_layout(expected: &ParamStore, actual: &ParamStore) -> Result<()> {
    for (name, p) in expected.iter() {
        match actual.get(name) {
            None => return Err(Error::Checkpoint(format!("missing parameter {name}"))),
            Some(t) if t.shape() != p.value.shape() => {
                return Err(Error::Checkpoint(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    t.shape(),
                    p.value.shape()
                )))
            }
            Some(_) => {}
        }
    }
    if let Some(extra) = actual.names().find(|n| !expected.contains(n)) {
        return Err(Error::Checkpoint(format!("unknown parameter {extra}")));
    }
    Ok(())
}
