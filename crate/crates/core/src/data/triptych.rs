//! Side-by-side masked input, reconstruction and original.

use std::path::Path;

use crate::error::{Error, Result};
use crate::masking::MaskPlan;
use crate::tensor::Tensor;

use super::pnm::save_image;

/// Value drawn over hidden pixels.
pub const GRAY: f64 = 0.5;
/// Width of the white bar between panels.
pub const SEPARATOR: usize = 2;

/// `image` with every hidden element (per `pixel_mask` over `[C, H, W]`)
/// set to [`GRAY`].
pub fn masked_view(image: &Tensor, pixel_mask: &[bool]) -> Result<Tensor> {
    if pixel_mask.len() != image.len() {
        return Err(Error::shape("masked_view", format!("{} mask entries for {:?}", pixel_mask.len(), image.shape())));
    }
    let data = image
        .data()
        .iter()
        .zip(pixel_mask)
        .map(|(&v, &m)| if m { GRAY } else { v })
        .collect();
    Tensor::new(image.shape().to_vec(), data)
}

/// Horizontal concatenation of three equal `[C, H, W]` panels, clamped to
/// `[0, 1]`, with white separators.
pub fn triptych(masked: &Tensor, recon: &Tensor, gt: &Tensor) -> Result<Tensor> {
    let (c, h, w) = match *gt.shape() {
        [c, h, w] => (c, h, w),
        ref s => return Err(Error::shape("triptych", format!("expected [C, H, W], got {s:?}"))),
    };
    if masked.shape() != gt.shape() || recon.shape() != gt.shape() {
        return Err(Error::shape(
            "triptych",
            format!("panels {:?}, {:?}, {:?} differ", masked.shape(), recon.shape(), gt.shape()),
        ));
    }
    let ow = 3 * w + 2 * SEPARATOR;
    let mut out = vec![1.0; c * h * ow];
    for (k, panel) in [masked, recon, gt].into_iter().enumerate() {
        let x0 = k * (w + SEPARATOR);
        let d = panel.data();
        for ch in 0..c {
            for y in 0..h {
                for x in 0..w {
                    out[(ch * h + y) * ow + x0 + x] = d[(ch * h + y) * w + x].clamp(0.0, 1.0);
                }
            }
        }
    }
    Tensor::new(vec![c, h, ow], out)
}

pub fn emit_triptych(masked: &Tensor, recon: &Tensor, gt: &Tensor, path: &Path) -> Result<Tensor> {
    let t = triptych(masked, recon, gt)?;
    save_image(path, &t)?;
    Ok(t)
}

/// Window-grid picture of a plan: each token is a `cell`-pixel square,
/// visible tokens white, hidden ones gray, window borders black.
pub fn render_plan(plan: &MaskPlan, cell: usize) -> Result<Tensor> {
    if cell < 2 {
        return Err(Error::invalid("cell must be at least 2 pixels"));
    }
    let side = plan.side();
    let unit = match plan.mode {
        crate::masking::MaskMode::Window => plan.r,
        crate::masking::MaskMode::Random => 1,
    };
    let px = side * cell;
    let mut data = vec![0.0; px * px];
    for y in 0..px {
        for x in 0..px {
            let (ty, tx) = (y / cell, x / cell);
            let on_border = (y % (unit * cell) == 0) || (x % (unit * cell) == 0) || y == px - 1 || x == px - 1;
            data[y * px + x] = if on_border {
                0.0
            } else if plan.mask_flags[ty * side + tx] {
                GRAY
            } else {
                1.0
            };
        }
    }
    Tensor::new(vec![1, px, px], data)
}
