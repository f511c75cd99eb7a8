//! Reconstruction heads.

use std::sync::Arc;

use crate::error::Result;
use crate::masking::MaskPlan;
use crate::tensor::{Tape, Var};

use super::encoder::{broadcast_token, unpack_index, EncoderOut, StageLayout};
use super::layers::{self, Init};
use super::spec::{DecoderVariant, EncoderVariant, Geometry, ModelSpec};

pub fn init_decoder(init: &mut Init<'_>, spec: &ModelSpec, geom: &Geometry) -> Result<()> {
    match spec.decoder_variant {
        DecoderVariant::Vit => init_vit(init, spec, geom),
        DecoderVariant::Swin => init_swin(init, spec, geom),
    }
}

fn init_vit(init: &mut Init<'_>, spec: &ModelSpec, geom: &Geometry) -> Result<()> {
    let width = spec.decoder_width(geom.latent_dim);
    if spec.decoder_embedding {
        init.linear("decoder.embed", geom.latent_dim, width, true)?;
    }
    if spec.encoder_variant != EncoderVariant::III {
        init.normal("decoder.mask_token", &[width])?;
    }
    init.normal("decoder.pos_embed", &[1, geom.recon.l, width])?;
    for j in 0..spec.decoder_depth {
        init.vit_block(&format!("decoder.blocks.{j}"), width)?;
    }
    init.norm("decoder.norm", width)?;
    init.linear("decoder.pred", width, geom.recon.d, true)
}

/// Swin-style up path: `layers_up.0` expands the bottleneck, `layers_up.i`
/// (i ≥ 1) mirrors encoder stage `S-1-i` and ends in an upsample except for
/// the last.
pub fn init_up_path(init: &mut Init<'_>, prefix: &str, layout: &StageLayout) -> Result<()> {
    let s = layout.len();
    if s > 1 {
        let d = layout.dim(s - 1);
        init.expanding(&format!("{prefix}layers_up.0"), d, 2, d / 2)?;
    }
    for i in 1..s {
        let stage = s - 1 - i;
        let dim = layout.dim(stage);
        for j in 0..layout.depths[stage] {
            init.swin_block(&format!("{prefix}layers_up.{i}.blocks.{j}"), dim, layout.heads[stage], layout.window)?;
        }
        if i + 1 < s {
            init.expanding(&format!("{prefix}layers_up.{i}.upsample"), dim, 2, dim / 2)?;
        }
    }
    Ok(())
}

fn init_swin(init: &mut Init<'_>, spec: &ModelSpec, geom: &Geometry) -> Result<()> {
    if spec.decoder_embedding {
        init.linear("decoder.embed", geom.latent_dim, geom.latent_dim, true)?;
    }
    let layout = StageLayout::of(spec);
    init_up_path(init, "decoder.", &layout)?;
    init.norm("decoder.norm_up", spec.embed_dim)?;
    init.linear("decoder.pred", spec.embed_dim, geom.recon.d, true)
}

/// Reconstruction tokens `[B, L, D]`.
pub fn decoder_forward(
    tape: &mut Tape<'_>,
    spec: &ModelSpec,
    geom: &Geometry,
    enc: &EncoderOut,
    plan: &MaskPlan,
) -> Result<Var> {
    match spec.decoder_variant {
        DecoderVariant::Vit => vit_forward(tape, spec, geom, enc, plan),
        DecoderVariant::Swin => swin_forward(tape, spec, enc),
    }
}

fn vit_forward(tape: &mut Tape<'_>, spec: &ModelSpec, geom: &Geometry, enc: &EncoderOut, plan: &MaskPlan) -> Result<Var> {
    let g = enc.latent;
    let mut x = g.var;
    if spec.decoder_embedding {
        x = layers::linear(tape, x, "decoder.embed")?;
    }
    if let Some(c) = geom.coarse_per_window {
        let m = tape.param("decoder.mask_token")?;
        let m = broadcast_token(tape, m, g.batch)?;
        let x_m = tape.concat(x, m, 1)?;
        x = tape.index_select(x_m, 1, Arc::new(unpack_index(plan, c)))?;
    }
    let pe = tape.param("decoder.pos_embed")?;
    x = tape.add(x, pe)?;
    for j in 0..spec.decoder_depth {
        x = layers::vit_block(tape, x, &format!("decoder.blocks.{j}"), spec.decoder_heads)?;
    }
    x = layers::layer_norm(tape, x, "decoder.norm")?;
    layers::linear(tape, x, "decoder.pred")
}

/// Runs the up path of [`init_up_path`]; `skip` supplies the per-stage
/// fusion used by the segmentation network.
pub fn run_up_path(
    tape: &mut Tape<'_>,
    prefix: &str,
    layout: &StageLayout,
    mut g: crate::geometry::GridVar,
    mut skip: impl FnMut(&mut Tape<'_>, usize, crate::geometry::GridVar) -> Result<crate::geometry::GridVar>,
) -> Result<crate::geometry::GridVar> {
    let s = layout.len();
    if s > 1 {
        g = layers::expanding_layer(tape, g, &format!("{prefix}layers_up.0"), 2)?;
    }
    for i in 1..s {
        let stage = s - 1 - i;
        g = skip(tape, i, g)?;
        g = layers::swin_stage(
            tape,
            g,
            &format!("{prefix}layers_up.{i}"),
            layout.depths[stage],
            layout.heads[stage],
            layout.window,
        )?;
        if i + 1 < s {
            g = layers::expanding_layer(tape, g, &format!("{prefix}layers_up.{i}.upsample"), 2)?;
        }
    }
    Ok(g)
}

fn swin_forward(tape: &mut Tape<'_>, spec: &ModelSpec, enc: &EncoderOut) -> Result<Var> {
    let mut g = enc.latent;
    if spec.decoder_embedding {
        let x = layers::linear(tape, g.var, "decoder.embed")?;
        g = g.with_var(x, g.dim);
    }
    let layout = StageLayout::of(spec);
    let g = run_up_path(tape, "decoder.", &layout, g, |_, _, g| Ok(g))?;
    let x = layers::layer_norm(tape, g.var, "decoder.norm_up")?;
    layers::linear(tape, x, "decoder.pred")
}
