//! Plain masked autoencoder with a single-scale transformer encoder, used as
//! the reference curve in loss comparisons.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{self, PatchSpec};
use crate::masking::{build_mask_plan, MaskMode, MaskPlan, RngState};
use crate::tensor::{Gradients, ParamStore, Tape, Tensor};

use super::layers::{self, Init};
use super::recon::reconstruct_image;
use super::spec::ReconSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct VitMaeSpec {
    pub image: PatchSpec,
    pub embed_dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub decoder_dim: usize,
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub mask_ratio: f64,
}

impl Default for VitMaeSpec {
    fn default() -> Self {
        VitMaeSpec {
            image: PatchSpec {
                patch_side: 8,
                ..PatchSpec::default()
            },
            embed_dim: 32,
            depth: 4,
            heads: 2,
            decoder_dim: 32,
            decoder_depth: 2,
            decoder_heads: 2,
            mask_ratio: 0.75,
        }
    }
}

impl VitMaeSpec {
    pub fn recon(&self) -> Result<ReconSpec> {
        self.image.validate()?;
        let (h, w) = self.image.grid();
        if h != w {
            return Err(Error::config("square token grid required"));
        }
        if self.embed_dim % self.heads != 0 || self.decoder_dim % self.decoder_heads != 0 {
            return Err(Error::config("heads must divide widths"));
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config("mask_ratio must be in [0, 1)"));
        }
        ReconSpec::new(self.image.image_h, self.image.image_w, self.image.channels, h * w)
    }
}

#[derive(Debug, Clone)]
pub struct VitMae {
    pub spec: VitMaeSpec,
    pub recon: ReconSpec,
    pub params: ParamStore,
}

/// Gather list putting kept tokens back in place; masked positions point at
/// index `keep_indices.len()`.
fn restore_index(plan: &MaskPlan) -> Vec<usize> {
    let k = plan.keep_indices.len();
    let mut idx = vec![k; plan.num_tokens()];
    for (s, &t) in plan.keep_indices.iter().enumerate() {
        idx[t] = s;
    }
    idx
}

impl VitMae {
    pub fn new(spec: VitMaeSpec, seed: u64) -> Result<Self> {
        let recon = spec.recon()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let (e, dd) = (spec.embed_dim, spec.decoder_dim);
        init.linear("patch_embed.proj", spec.image.patch_len(), e, true)?;
        init.normal("pos_embed", &[1, recon.l, e])?;
        for j in 0..spec.depth {
            init.vit_block(&format!("blocks.{j}"), e)?;
        }
        init.norm("norm", e)?;
        init.linear("decoder.embed", e, dd, true)?;
        init.normal("decoder.mask_token", &[dd])?;
        init.normal("decoder.pos_embed", &[1, recon.l, dd])?;
        for j in 0..spec.decoder_depth {
            init.vit_block(&format!("decoder.blocks.{j}"), dd)?;
        }
        init.norm("decoder.norm", dd)?;
        init.linear("decoder.pred", dd, recon.d, true)?;
        Ok(VitMae { spec, recon, params })
    }

    pub fn plan(&self, rng: &mut RngState) -> Result<MaskPlan> {
        build_mask_plan(self.spec.image.grid().0, 1, self.spec.mask_ratio, rng, MaskMode::Random)
    }

    /// Masked reconstruction loss and gradients for `[B, C, H, W]`.
    pub fn loss_and_grads(&self, image: &Tensor, plan: &MaskPlan) -> Result<(f64, Gradients)> {
        let mut tape = Tape::with_params(&self.params);
        let batch = image.shape()[0];
        let x = tape.constant(image.clone());
        let w = tape.param("patch_embed.proj.weight")?;
        let b = tape.param("patch_embed.proj.bias")?;
        let g = geometry::patch_partition(&mut tape, x, &self.spec.image, w, Some(b))?;
        let pe = tape.param("pos_embed")?;
        let x = tape.add(g.var, pe)?;
        let mut x = tape.index_select(x, 1, Arc::new(plan.keep_indices.clone()))?;
        for j in 0..self.spec.depth {
            x = layers::vit_block(&mut tape, x, &format!("blocks.{j}"), self.spec.heads)?;
        }
        x = layers::layer_norm(&mut tape, x, "norm")?;
        x = layers::linear(&mut tape, x, "decoder.embed")?;
        let m = tape.param("decoder.mask_token")?;
        let m = super::encoder::broadcast_token(&mut tape, m, batch)?;
        let x_m = tape.concat(x, m, 1)?;
        x = tape.index_select(x_m, 1, Arc::new(restore_index(plan)))?;
        let pe = tape.param("decoder.pos_embed")?;
        x = tape.add(x, pe)?;
        for j in 0..self.spec.decoder_depth {
            x = layers::vit_block(&mut tape, x, &format!("decoder.blocks.{j}"), self.spec.decoder_heads)?;
        }
        x = layers::layer_norm(&mut tape, x, "decoder.norm")?;
        x = layers::linear(&mut tape, x, "decoder.pred")?;
        let recon = reconstruct_image(&mut tape, x, &self.recon)?;
        let per_image = plan.pixel_mask(self.spec.image.patch_side, self.spec.image.channels);
        let mask: Vec<bool> = per_image.iter().copied().cycle().take(per_image.len() * batch).collect();
        let loss = tape.masked_mse(recon, image, &mask)?;
        let v = tape.value(loss).item()?;
        Ok((v, tape.backward(loss)?))
    }
}
