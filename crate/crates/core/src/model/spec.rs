//! Architecture description, validation and the shape dry-run.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::geometry::PatchSpec;
use crate::masking::{keep_count, MaskMode};

use super::layers::effective_window;

/// Where masked tokens go inside the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum EncoderVariant {
    /// Drop masked windows and run one stage fewer.
    I,
    /// Double the image, drop masked windows, run every stage.
    II,
    /// Keep all tokens, masked ones replaced by a learned vector.
    #[default]
    III,
}

impl FromStr for EncoderVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_uppercase().as_str() {
            "I" | "1" => Ok(EncoderVariant::I),
            "II" | "2" => Ok(EncoderVariant::II),
            "III" | "3" => Ok(EncoderVariant::III),
            _ => Err(Error::config(format!("unknown encoder variant {s:?} (I|II|III)"))),
        }
    }
}

impl fmt::Display for EncoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EncoderVariant::I => "I",
            EncoderVariant::II => "II",
            EncoderVariant::III => "III",
        })
    }
}

/// Reconstruction head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum DecoderVariant {
    /// Global-attention blocks over the latent tokens.
    Vit,
    /// Mirrored Swin stages with patch expanding.
    #[default]
    Swin,
}

impl FromStr for DecoderVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "vit" | "i" => Ok(DecoderVariant::Vit),
            "swin" | "ii" => Ok(DecoderVariant::Swin),
            _ => Err(Error::config(format!("unknown decoder variant {s:?} (vit|swin)"))),
        }
    }
}

impl fmt::Display for DecoderVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecoderVariant::Vit => "vit",
            DecoderVariant::Swin => "swin",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub encoder_variant: EncoderVariant,
    pub decoder_variant: DecoderVariant,
    /// Extra linear layer at the decoder input.
    pub decoder_embedding: bool,
    pub use_abs_pos_embed: bool,
    /// Source image geometry (before any doubling).
    pub image: PatchSpec,
    pub embed_dim: usize,
    pub stage_depths: Vec<usize>,
    pub head_counts: Vec<usize>,
    pub attn_window: usize,
    pub mask_window_r: usize,
    pub mask_ratio: f64,
    pub mask_mode: MaskMode,
    /// Global-attention decoder depth, heads and width (the width is used
    /// only when `decoder_embedding` is on).
    pub decoder_depth: usize,
    pub decoder_heads: usize,
    pub decoder_dim: Option<usize>,
    /// Normalize each target patch to zero mean, unit variance.
    pub norm_pix: bool,
}

impl Default for ModelSpec {
    fn default() -> Self {
        ModelSpec {
            encoder_variant: EncoderVariant::III,
            decoder_variant: DecoderVariant::Swin,
            decoder_embedding: false,
            use_abs_pos_embed: false,
            image: PatchSpec::default(),
            embed_dim: 16,
            stage_depths: vec![2, 2, 2],
            head_counts: vec![2, 2, 2],
            attn_window: 2,
            mask_window_r: 2,
            mask_ratio: 0.75,
            mask_mode: MaskMode::Window,
            decoder_depth: 2,
            decoder_heads: 2,
            decoder_dim: None,
            norm_pix: false,
        }
    }
}

/// Geometry of a reconstruction: `L` tokens of width `D` tile an
/// `H × W × C` image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconSpec {
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub l: usize,
    pub d: usize,
}

/// Token width that lets `l` tokens tile an `h × w × c` image.
pub fn token_dim(h: usize, w: usize, c: usize, l: usize) -> Result<usize> {
    let total = h * w * c;
    if l == 0 || total % l != 0 {
        return Err(Error::invalid(format!("{l} tokens cannot tile {h}x{w}x{c} values")));
    }
    Ok(total / l)
}

impl ReconSpec {
    pub fn new(h: usize, w: usize, c: usize, l: usize) -> Result<Self> {
        let d = token_dim(h, w, c, l)?;
        let r = ReconSpec { h, w, c, l, d };
        r.patch_side()?;
        Ok(r)
    }

    /// Side of the square pixel patch each token covers.
    pub fn patch_side(&self) -> Result<usize> {
        let area = self.d / self.c;
        let p = (area as f64).sqrt().round() as usize;
        if self.d % self.c != 0
            || p * p != area
            || self.h % p != 0
            || self.w % p != 0
            || (self.h / p) * (self.w / p) != self.l
        {
            return Err(Error::invalid(format!(
                "{} tokens of width {} do not tile {}x{}x{} with square patches",
                self.l, self.d, self.h, self.w, self.c
            )));
        }
        Ok(p)
    }
}

/// Everything the shapes of a model depend on, derived without running it.
#[derive(Debug, Clone, PartialEq)]
pub struct Geometry {
    /// Image actually fed to the encoder.
    pub input: PatchSpec,
    /// Tokens per side after embedding.
    pub token_side: usize,
    /// Masking windows per side.
    pub d: usize,
    /// Tokens per side once masked windows are dropped.
    pub packed_side: Option<usize>,
    /// Stages the encoder runs.
    pub stages: usize,
    /// Token grid side entering each stage.
    pub stage_sides: Vec<usize>,
    pub latent_side: usize,
    pub latent_dim: usize,
    /// Latent tokens per masking window side (dropping variants).
    pub coarse_per_window: Option<usize>,
    pub recon: ReconSpec,
}

impl ModelSpec {
    /// Full-size reference geometry: 224 px RGB, Swin-T stages, window 7.
    pub fn full_scale() -> Self {
        ModelSpec {
            image: PatchSpec {
                patch_side: 4,
                image_h: 224,
                image_w: 224,
                channels: 3,
            },
            embed_dim: 96,
            stage_depths: vec![2, 2, 6, 2],
            head_counts: vec![3, 6, 12, 24],
            attn_window: 7,
            mask_window_r: 4,
            decoder_depth: 8,
            decoder_heads: 16,
            ..ModelSpec::default()
        }
    }

    /// Smallest four-stage model: 16 px RGB, 2 px patches, width 8.
    pub fn tiny() -> Self {
        ModelSpec {
            image: PatchSpec {
                patch_side: 2,
                image_h: 16,
                image_w: 16,
                channels: 3,
            },
            embed_dim: 8,
            stage_depths: vec![1, 1, 1, 1],
            head_counts: vec![2, 2, 2, 2],
            ..ModelSpec::default()
        }
    }

    pub fn num_stages(&self) -> usize {
        self.stage_depths.len()
    }

    /// Channel width of stage `i`.
    pub fn stage_dim(&self, i: usize) -> usize {
        self.embed_dim << i
    }

    /// Image fed to the encoder (doubled for variant II).
    pub fn input_image(&self) -> PatchSpec {
        let mut p = self.image;
        if self.encoder_variant == EncoderVariant::II {
            p.image_h *= 2;
            p.image_w *= 2;
        }
        p
    }

    pub fn decoder_width(&self, latent_dim: usize) -> usize {
        if self.decoder_embedding {
            self.decoder_dim.unwrap_or(latent_dim)
        } else {
            latent_dim
        }
    }

    fn check_stage_side(&self, i: usize, side: usize) -> Result<()> {
        let (win, _) = effective_window(side, side, self.attn_window, true);
        if side == 0 || side % win != 0 {
            return Err(Error::config(format!(
                "stage {i} grid {side}x{side} is not divisible by window {}",
                self.attn_window
            )));
        }
        Ok(())
    }

    /// Validates the spec and derives its geometry.
    pub fn geometry(&self) -> Result<Geometry> {
        let s = self.num_stages();
        if s == 0 || self.head_counts.len() != s {
            return Err(Error::config(format!(
                "{} stage depths vs {} head counts",
                s,
                self.head_counts.len()
            )));
        }
        if self.stage_depths.contains(&0) {
            return Err(Error::config("stage depths must be positive"));
        }
        if self.embed_dim == 0 || self.attn_window == 0 || self.mask_window_r == 0 {
            return Err(Error::config("embed_dim, attn_window and mask_window_r must be positive"));
        }
        for (i, &h) in self.head_counts.iter().enumerate() {
            if h == 0 || self.stage_dim(i) % h != 0 {
                return Err(Error::config(format!(
                    "stage {i}: {h} heads do not divide width {}",
                    self.stage_dim(i)
                )));
            }
        }
        if !(0.0..1.0).contains(&self.mask_ratio) {
            return Err(Error::config(format!("mask_ratio {} outside [0, 1)", self.mask_ratio)));
        }
        let input = self.input_image();
        input.validate()?;
        let (gh, gw) = input.grid();
        if gh != gw {
            return Err(Error::config(format!("token grid {gh}x{gw} is not square")));
        }
        let side = gh;
        let r = self.mask_window_r;
        if side % r != 0 {
            return Err(Error::config(format!("{side} tokens per side not divisible by mask window {r}")));
        }
        let d = side / r;
        let dropping = self.encoder_variant != EncoderVariant::III;
        if self.encoder_variant == EncoderVariant::III && self.use_abs_pos_embed {
            return Err(Error::config("encoder variant III has no absolute position embedding"));
        }
        if dropping && self.decoder_variant == DecoderVariant::Swin {
            return Err(Error::config(format!(
                "encoder variant {} needs the vit decoder",
                self.encoder_variant
            )));
        }
        if dropping && self.mask_mode != MaskMode::Window {
            return Err(Error::config("dropping encoder variants need window masking"));
        }

        let units = match self.mask_mode {
            MaskMode::Window => d * d,
            MaskMode::Random => side * side,
        };
        if keep_count(units, self.mask_ratio) == 0 {
            return Err(Error::config(format!("mask_ratio {} keeps nothing", self.mask_ratio)));
        }

        let (stages, first_side, packed_side) = if dropping {
            let kept = keep_count(d * d, self.mask_ratio);
            let k = (kept as f64).sqrt().round() as usize;
            if kept == 0 || k * k != kept {
                return Err(Error::config(format!(
                    "{kept} kept windows cannot be packed into a square grid"
                )));
            }
            if self.encoder_variant == EncoderVariant::II && 4 * kept != d * d {
                return Err(Error::config(format!(
                    "variant II must keep exactly a quarter of {} windows, ratio {} keeps {kept}",
                    d * d,
                    self.mask_ratio
                )));
            }
            let stages = if self.encoder_variant == EncoderVariant::I { s - 1 } else { s };
            if stages == 0 {
                return Err(Error::config("variant I needs at least two stages"));
            }
            (stages, k * r, Some(k * r))
        } else {
            (s, side, None)
        };

        let merges = stages - 1;
        let mut stage_sides = Vec::with_capacity(stages);
        let mut cur = first_side;
        for i in 0..stages {
            self.check_stage_side(i, cur)?;
            stage_sides.push(cur);
            if i + 1 < stages {
                if cur % 2 != 0 {
                    return Err(Error::config(format!("stage {i} grid {cur} cannot be merged")));
                }
                cur /= 2;
            }
        }
        let latent_dim = self.stage_dim(merges);

        let coarse_per_window = if dropping {
            if r % (1 << merges) != 0 {
                return Err(Error::config(format!(
                    "mask window {r} must be divisible by {} for variant {}",
                    1 << merges,
                    self.encoder_variant
                )));
            }
            Some(r >> merges)
        } else {
            None
        };

        let recon = match self.decoder_variant {
            DecoderVariant::Swin => ReconSpec::new(input.image_h, input.image_w, input.channels, side * side)?,
            DecoderVariant::Vit => {
                let l = match coarse_per_window {
                    Some(c) => (d * c) * (d * c),
                    None => cur * cur,
                };
                let width = self.decoder_width(latent_dim);
                if self.decoder_heads == 0 || width % self.decoder_heads != 0 {
                    return Err(Error::config(format!(
                        "{} decoder heads do not divide width {width}",
                        self.decoder_heads
                    )));
                }
                ReconSpec::new(input.image_h, input.image_w, input.channels, l)?
            }
        };

        Ok(Geometry {
            input,
            token_side: side,
            d,
            packed_side,
            stages,
            stage_sides,
            latent_side: cur,
            latent_dim,
            coarse_per_window,
            recon,
        })
    }
}
