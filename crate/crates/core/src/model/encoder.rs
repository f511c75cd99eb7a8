//! Swin encoder shared by the autoencoder and the segmentation network.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::geometry::{self, GridVar, PatchSpec};
use crate::masking::{self, MaskPlan};
use crate::tensor::{Tape, Var};

use super::layers::{self, Init};
use super::spec::{EncoderVariant, Geometry, ModelSpec};

/// Hierarchical stage layout.
#[derive(Debug, Clone, PartialEq)]
pub struct StageLayout {
    pub embed_dim: usize,
    pub depths: Vec<usize>,
    pub heads: Vec<usize>,
    pub window: usize,
}

impl StageLayout {
    pub fn of(spec: &ModelSpec) -> Self {
        StageLayout {
            embed_dim: spec.embed_dim,
            depths: spec.stage_depths.clone(),
            heads: spec.head_counts.clone(),
            window: spec.attn_window,
        }
    }

    pub fn dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    pub fn len(&self) -> usize {
        self.depths.len()
    }

    pub fn is_empty(&self) -> bool {
        self.depths.is_empty()
    }
}

/// Patch embedding with its norm, plus the optional absolute position
/// table over `tokens` positions.
pub fn init_embedding(init: &mut Init<'_>, image: &PatchSpec, dim: usize, pos_tokens: Option<usize>) -> Result<()> {
    init.linear("patch_embed.proj", image.patch_len(), dim, true)?;
    init.norm("patch_embed.norm", dim)?;
    if let Some(n) = pos_tokens {
        init.normal("absolute_pos_embed", &[1, n, dim])?;
    }
    Ok(())
}

/// The first `n` stages (`layers.{i}`), each but the last followed by patch
/// merging.
pub fn init_stages(init: &mut Init<'_>, layout: &StageLayout, n: usize) -> Result<()> {
    for i in 0..n {
        let dim = layout.dim(i);
        for j in 0..layout.depths[i] {
            init.swin_block(&format!("layers.{i}.blocks.{j}"), dim, layout.heads[i], layout.window)?;
        }
        if i + 1 < n {
            init.merging(&format!("layers.{i}.downsample"), dim)?;
        }
    }
    Ok(())
}

/// Patch partition, linear embedding, norm and (when present) the absolute
/// position table.
pub fn embed(tape: &mut Tape<'_>, image: Var, spec: &PatchSpec) -> Result<GridVar> {
    let w = tape.param("patch_embed.proj.weight")?;
    let b = tape.param("patch_embed.proj.bias")?;
    let g = geometry::patch_partition(tape, image, spec, w, Some(b))?;
    let x = layers::layer_norm(tape, g.var, "patch_embed.norm")?;
    let x = if tape.has_param("absolute_pos_embed") {
        let pe = tape.param("absolute_pos_embed")?;
        tape.add(x, pe)?
    } else {
        x
    };
    Ok(g.with_var(x, g.dim))
}

/// Runs the first `n` stages. Returns the final grid and the grid entering
/// each stage.
pub fn run_stages(tape: &mut Tape<'_>, mut g: GridVar, layout: &StageLayout, n: usize) -> Result<(GridVar, Vec<GridVar>)> {
    let mut inputs = Vec::with_capacity(n);
    for i in 0..n {
        inputs.push(g);
        g = layers::swin_stage(tape, g, &format!("layers.{i}"), layout.depths[i], layout.heads[i], layout.window)?;
        if i + 1 < n {
            g = layers::merging_layer(tape, g, &format!("layers.{i}.downsample"))?;
        }
    }
    Ok((g, inputs))
}

/// Encoder parameters of an autoencoder.
pub fn init_encoder(init: &mut Init<'_>, spec: &ModelSpec, geom: &Geometry) -> Result<()> {
    let layout = StageLayout::of(spec);
    let pos = spec
        .use_abs_pos_embed
        .then_some(geom.token_side * geom.token_side);
    init_embedding(init, &geom.input, spec.embed_dim, pos)?;
    if spec.encoder_variant == EncoderVariant::III {
        init.normal("mask_token", &[spec.embed_dim])?;
    }
    init_stages(init, &layout, geom.stages)?;
    init.norm("norm", geom.latent_dim)
}

pub struct EncoderOut {
    /// Normalized final grid. For dropping variants this is the packed grid
    /// of kept windows.
    pub latent: GridVar,
    /// Grid entering each stage.
    pub stage_inputs: Vec<GridVar>,
}

/// Encodes `image` (already at the encoder's input size) under `plan`.
pub fn encoder_forward(
    tape: &mut Tape<'_>,
    spec: &ModelSpec,
    geom: &Geometry,
    image: Var,
    plan: &MaskPlan,
) -> Result<EncoderOut> {
    if plan.side() != geom.token_side {
        return Err(Error::shape(
            "encoder",
            format!("plan covers {0}x{0} tokens, grid is {1}x{1}", plan.side(), geom.token_side),
        ));
    }
    let layout = StageLayout::of(spec);
    let g = embed(tape, image, &geom.input)?;
    let g = match spec.encoder_variant {
        EncoderVariant::III => {
            let m = tape.param("mask_token")?;
            masking::apply_mask_tokens(tape, g, plan, m)?
        }
        EncoderVariant::I | EncoderVariant::II => masking::pack_kept_windows(tape, g, plan)?,
    };
    let (g, stage_inputs) = run_stages(tape, g, &layout, geom.stages)?;
    let x = layers::layer_norm(tape, g.var, "norm")?;
    Ok(EncoderOut {
        latent: g.with_var(x, g.dim),
        stage_inputs,
    })
}

/// Gather list that spreads packed latent tokens of kept windows back onto
/// the full coarse grid; masked positions point at index `kept_tokens`.
pub fn unpack_index(plan: &MaskPlan, coarse_per_window: usize) -> Vec<usize> {
    let kept = plan.kept_windows_sorted();
    let k = (kept.len() as f64).sqrt().round() as usize;
    let c = coarse_per_window;
    let d = plan.d;
    let full = d * c;
    let packed = k * c;
    let mut slot_of = vec![None; d * d];
    for (s, &x) in kept.iter().enumerate() {
        slot_of[x] = Some(s);
    }
    let fill = packed * packed;
    let mut idx = Vec::with_capacity(full * full);
    for row in 0..full {
        for col in 0..full {
            let x = (row / c) * d + col / c;
            idx.push(match slot_of[x] {
                Some(s) => ((s / k) * c + row % c) * packed + (s % k) * c + col % c,
                None => fill,
            });
        }
    }
    idx
}

/// Learned vector `[C]` replicated to `[B, 1, C]`.
pub fn broadcast_token(tape: &mut Tape<'_>, v: Var, batch: usize) -> Result<Var> {
    let c = tape.shape(v)[0];
    let t = tape.reshape(v, &[1, 1, c])?;
    if batch == 1 {
        Ok(t)
    } else {
        tape.index_select(t, 0, Arc::new(vec![0; batch]))
    }
}
