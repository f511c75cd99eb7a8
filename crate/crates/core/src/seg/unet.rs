//! Swin-Unet and weight transfer from a pretrained autoencoder.

use log::warn;

use crate::config::SegOptions;
use crate::error::{Error, Result};
use crate::geometry::{GridVar, PatchSpec};
use crate::model::decoder::{init_up_path, run_up_path};
use crate::model::encoder::{embed, init_embedding, init_stages, run_stages, StageLayout};
use crate::model::layers::{self, Init};
use crate::model::{DecoderVariant, EncoderVariant, ModelSpec};
use crate::tensor::{ParamStore, Tape, Tensor, Var};
use crate::train::pretrain::load_mae;
use crate::train::Checkpoint;

#[derive(Debug, Clone, PartialEq)]
pub struct SwinUnetSpec {
    pub image: PatchSpec,
    pub layout: StageLayout,
    pub num_classes: usize,
    pub use_abs_pos_embed: bool,
    /// Initialize decoder blocks from the mirrored encoder stages.
    pub decoder_shares_pretrained_blocks: bool,
    /// Initialize the up path from the pretrained Swin decoder instead.
    pub transfer_decoder_weights: bool,
}

impl SwinUnetSpec {
    pub fn new(model: &ModelSpec, seg: &SegOptions) -> Self {
        SwinUnetSpec {
            image: model.image,
            layout: StageLayout::of(model),
            num_classes: seg.num_classes,
            use_abs_pos_embed: seg.use_abs_pos_embed,
            decoder_shares_pretrained_blocks: seg.decoder_shares_pretrained_blocks,
            transfer_decoder_weights: seg.transfer_decoder_weights,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::config("segmentation needs at least two classes"));
        }
        // The encoder geometry is that of a variant III autoencoder.
        let probe = ModelSpec {
            image: self.image,
            embed_dim: self.layout.embed_dim,
            stage_depths: self.layout.depths.clone(),
            head_counts: self.layout.heads.clone(),
            attn_window: self.layout.window,
            mask_window_r: 1,
            mask_ratio: 0.0,
            ..ModelSpec::default()
        };
        probe.geometry().map(|_| ())
    }

    pub fn token_side(&self) -> usize {
        self.image.grid().0
    }
}

#[derive(Debug, Clone)]
pub struct SwinUnet {
    pub spec: SwinUnetSpec,
    pub params: ParamStore,
}

/// Whether `name` belongs to the encoder and bottleneck.
pub fn is_encoder_name(name: &str) -> bool {
    name.starts_with("patch_embed.")
        || name.starts_with("layers.")
        || name.starts_with("norm.")
        || name == "absolute_pos_embed"
}

impl SwinUnet {
    pub fn new(spec: SwinUnetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut init = Init::new(&mut params, seed);
        let l = &spec.layout;
        let side = spec.token_side();
        init_embedding(
            &mut init,
            &spec.image,
            l.embed_dim,
            spec.use_abs_pos_embed.then_some(side * side),
        )?;
        init_stages(&mut init, l, l.len())?;
        init.norm("norm", l.dim(l.len() - 1))?;
        init_up_path(&mut init, "", l)?;
        let s = l.len();
        for i in 1..s {
            let dim = l.dim(s - 1 - i);
            init.linear(&format!("concat_back_dim.{i}"), 2 * dim, dim, true)?;
        }
        init.norm("norm_up", l.embed_dim)?;
        let p = spec.image.patch_side;
        init.expanding("final_expand", l.embed_dim, p, l.embed_dim)?;
        init.linear("output", l.embed_dim, spec.num_classes, false)?;
        Ok(SwinUnet { spec, params })
    }

    /// Per-pixel logits `[B·H·W, K]`, rows in `(b, y, x)` order.
    pub fn logits(&self, tape: &mut Tape<'_>, image: Var) -> Result<Var> {
        let l = &self.spec.layout;
        let s = l.len();
        let g = embed(tape, image, &self.spec.image)?;
        let (g, skips) = run_stages(tape, g, l, s)?;
        let x = layers::layer_norm(tape, g.var, "norm")?;
        let g = g.with_var(x, g.dim);
        let g = run_up_path(tape, "", l, g, |tape, i, up: GridVar| {
            let skip = skips[s - 1 - i];
            let cat = tape.concat(up.var, skip.var, 2)?;
            let y = layers::linear(tape, cat, &format!("concat_back_dim.{i}"))?;
            Ok(up.with_var(y, up.dim))
        })?;
        let x = layers::layer_norm(tape, g.var, "norm_up")?;
        let g = g.with_var(x, g.dim);
        let g = layers::expanding_layer(tape, g, "final_expand", self.spec.image.patch_side)?;
        let w = tape.param("output.weight")?;
        let y = tape.matmul(g.var, w)?;
        tape.reshape(y, &[g.batch * g.h * g.w, self.spec.num_classes])
    }

    /// Mean per-pixel cross-entropy and gradients for `[1, C, H, W]`.
    pub fn loss_and_grads(&self, image: &Tensor, labels: &[usize]) -> Result<(f64, crate::tensor::Gradients)> {
        let mut tape = Tape::with_params(&self.params);
        let x = tape.constant(image.clone());
        let logits = self.logits(&mut tape, x)?;
        let loss = tape.cross_entropy(logits, labels)?;
        let v = tape.value(loss).item()?;
        Ok((v, tape.backward(loss)?))
    }

    /// Arg-max class per pixel for `[1, C, H, W]`.
    pub fn predict(&self, image: &Tensor) -> Result<Vec<usize>> {
        let mut tape = Tape::with_params(&self.params);
        let x = tape.constant(image.clone());
        let logits = self.logits(&mut tape, x)?;
        let k = self.spec.num_classes;
        Ok(tape
            .value(logits)
            .data()
            .chunks(k)
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |best, (i, &v)| if v > best.1 { (i, v) } else { best })
                    .0
            })
            .collect())
    }
}

/// Outcome of initializing a Swin-Unet from a checkpoint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TransferReport {
    /// Encoder and bottleneck names copied from the checkpoint.
    pub loaded: Vec<String>,
    /// Decoder names copied from a checkpoint tensor, as `(target, source)`.
    pub copied: Vec<(String, String)>,
    /// Names left at their random initialization.
    pub initialized: Vec<String>,
    /// Encoder and bottleneck names the checkpoint lacks.
    pub missing: Vec<String>,
    /// Same name, different shape (not claimed loadable).
    pub mismatched: Vec<(String, Vec<usize>, Vec<usize>)>,
    /// Checkpoint encoder names with no counterpart.
    pub unused: Vec<String>,
}

impl TransferReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "loaded {}  copied {}  initialized {}  missing {}  mismatched {}  unused {}\n",
            self.loaded.len(),
            self.copied.len(),
            self.initialized.len(),
            self.missing.len(),
            self.mismatched.len(),
            self.unused.len()
        );
        for n in &self.missing {
            s.push_str(&format!("missing    {n}\n"));
        }
        for (n, a, b) in &self.mismatched {
            s.push_str(&format!("mismatched {n} checkpoint {a:?} model {b:?}\n"));
        }
        for n in &self.unused {
            s.push_str(&format!("unused     {n}\n"));
        }
        s
    }
}

/// Whether a checkpoint name of an autoencoder with `variant` is expected
/// to have the same shape downstream.
fn claimed_loadable(variant: EncoderVariant, name: &str) -> bool {
    match variant {
        EncoderVariant::III => true,
        EncoderVariant::I => !name.starts_with("norm."),
        EncoderVariant::II => name != "absolute_pos_embed",
    }
}

/// Builds a Swin-Unet, loading encoder and bottleneck weights from an
/// autoencoder checkpoint when one is given.
pub fn build_swin_unet_from_checkpoint(
    ckpt: Option<&Checkpoint>,
    spec: SwinUnetSpec,
    seed: u64,
) -> Result<(SwinUnet, TransferReport)> {
    let mut net = SwinUnet::new(spec, seed)?;
    let mut report = TransferReport::default();
    let Some(ckpt) = ckpt else {
        report.initialized = net.params.names().map(String::from).collect();
        return Ok((net, report));
    };
    let mae = load_mae(ckpt)?;
    let variant = mae.spec.encoder_variant;
    let mut touched = std::collections::BTreeSet::new();

    for (name, p) in mae.params.iter() {
        if name.starts_with("decoder.") {
            continue;
        }
        match net.params.get(name) {
            None => report.unused.push(name.to_string()),
            Some(t) if t.shape() == p.value.shape() => {
                net.params.set(name, p.value.clone())?;
                touched.insert(name.to_string());
                report.loaded.push(name.to_string());
            }
            Some(t) => {
                if claimed_loadable(variant, name) {
                    return Err(Error::Checkpoint(format!(
                        "{name}: checkpoint shape {:?} does not fit model shape {:?}",
                        p.value.shape(),
                        t.shape()
                    )));
                }
                report
                    .mismatched
                    .push((name.to_string(), p.value.shape().to_vec(), t.shape().to_vec()));
            }
        }
    }
    for name in net.params.names() {
        if is_encoder_name(name) && !mae.params.contains(name) {
            report.missing.push(name.to_string());
        }
    }

    let s = net.spec.layout.len();
    let mut copies: Vec<(String, String)> = Vec::new();
    if net.spec.transfer_decoder_weights {
        if mae.spec.decoder_variant != DecoderVariant::Swin {
            return Err(Error::config("decoder weight transfer needs a checkpoint with the swin decoder"));
        }
        for name in mae.params.names() {
            if let Some(rest) = name.strip_prefix("decoder.") {
                if rest.starts_with("layers_up.") || rest.starts_with("norm_up.") {
                    copies.push((rest.to_string(), name.to_string()));
                }
            }
        }
    } else if net.spec.decoder_shares_pretrained_blocks {
        for name in net.params.names() {
            let Some(rest) = name.strip_prefix("layers_up.") else { continue };
            let Some((i, tail)) = rest.split_once('.') else { continue };
            if !tail.starts_with("blocks.") {
                continue;
            }
            let i: usize = i.parse().map_err(|_| Error::invalid(format!("bad layer name {name}")))?;
            let src = format!("layers.{}.{tail}", s - 1 - i);
            if touched.contains(&src) {
                copies.push((name.to_string(), src));
            }
        }
    }
    for (dst, src) in copies {
        let value = mae
            .params
            .get(&src)
            .ok_or_else(|| Error::Checkpoint(format!("missing source {src}")))?
            .clone();
        match net.params.get(&dst) {
            Some(t) if t.shape() == value.shape() => {
                net.params.set(&dst, value)?;
                touched.insert(dst.clone());
                report.copied.push((dst, src));
            }
            Some(t) => {
                return Err(Error::Checkpoint(format!(
                    "{dst}: source {src} has shape {:?}, model {:?}",
                    value.shape(),
                    t.shape()
                )))
            }
            None => warn!("decoder weight {src} has no target {dst}"),
        }
    }
    report.initialized = net
        .params
        .names()
        .filter(|n| !touched.contains(*n))
        .map(String::from)
        .collect();
    Ok((net, report))
}
