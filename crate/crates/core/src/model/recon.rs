//! Conversions between images and reconstruction tokens.

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

use super::spec::ReconSpec;

fn image_dims(tape: &Tape<'_>, image: Var, recon: &ReconSpec) -> Result<usize> {
    match *tape.shape(image) {
        [b, c, h, w] if c == recon.c && h == recon.h && w == recon.w => Ok(b),
        ref s => Err(Error::shape(
            "flatten_image",
            format!("image {s:?} vs [B, {}, {}, {}]", recon.c, recon.h, recon.w),
        )),
    }
}

/// `[B, C, H, W]` → `[B, L, D]`, each token a `p × p × C` patch laid out
/// `(row, col, channel)`.
pub fn flatten_image(tape: &mut Tape<'_>, image: Var, recon: &ReconSpec) -> Result<Var> {
    let b = image_dims(tape, image, recon)?;
    let p = recon.patch_side()?;
    let (gh, gw) = (recon.h / p, recon.w / p);
    let x = tape.reshape(image, &[b, recon.c, gh, p, gw, p])?;
    let x = tape.permute(x, &[0, 2, 4, 3, 5, 1])?;
    tape.reshape(x, &[b, recon.l, recon.d])
}

/// Inverse of [`flatten_image`]: `[B, L, D]` → `[B, C, H, W]`.
pub fn reconstruct_image(tape: &mut Tape<'_>, tokens: Var, recon: &ReconSpec) -> Result<Var> {
    let b = match *tape.shape(tokens) {
        [b, l, d] if l == recon.l && d == recon.d => b,
        ref s => {
            return Err(Error::shape(
                "reconstruct_image",
                format!("tokens {s:?} vs [B, {}, {}]", recon.l, recon.d),
            ))
        }
    };
    let p = recon.patch_side()?;
    let (gh, gw) = (recon.h / p, recon.w / p);
    let x = tape.reshape(tokens, &[b, gh, gw, p, p, recon.c])?;
    let x = tape.permute(x, &[0, 5, 1, 3, 2, 4])?;
    tape.reshape(x, &[b, recon.c, recon.h, recon.w])
}

/// Value-level [`flatten_image`].
pub fn flatten(image: &Tensor, recon: &ReconSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(image.clone());
    let t = flatten_image(&mut tape, v, recon)?;
    Ok(tape.value(t).clone())
}

/// Value-level [`reconstruct_image`].
pub fn reconstruct(tokens: &Tensor, recon: &ReconSpec) -> Result<Tensor> {
    let mut tape = Tape::new();
    let v = tape.constant(tokens.clone());
    let t = reconstruct_image(&mut tape, v, recon)?;
    Ok(tape.value(t).clone())
}

/// Each token-sized patch of `image` shifted to zero mean and scaled to unit
/// variance.
pub fn normalize_patches(image: &Tensor, recon: &ReconSpec) -> Result<Tensor> {
    let mut tokens = flatten(image, recon)?;
    let d = recon.d;
    for patch in tokens.data_mut().chunks_mut(d) {
        let mean = patch.iter().sum::<f64>() / d as f64;
        let var = patch.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let inv = 1.0 / (var + 1e-6).sqrt();
        for v in patch.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    reconstruct(&tokens, recon)
}

/// Nearest-neighbour upscaling of `[B, C, H, W]` by an integer factor.
pub fn upscale_nearest(image: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = match *image.shape() {
        [b, c, h, w] => (b, c, h, w),
        ref s => return Err(Error::shape("upscale", format!("expected [B, C, H, W], got {s:?}"))),
    };
    if factor == 0 {
        return Err(Error::invalid("upscale factor must be positive"));
    }
    let (oh, ow) = (h * factor, w * factor);
    let src = image.data();
    let mut out = Vec::with_capacity(b * c * oh * ow);
    for plane in src.chunks(h * w).take(b * c) {
        for y in 0..oh {
            let row = &plane[(y / factor) * w..(y / factor + 1) * w];
            out.extend((0..ow).map(|x| row[x / factor]));
        }
    }
    Tensor::new(vec![b, c, oh, ow], out)
}
