//! Parameterized building blocks shared by the autoencoder and Swin-Unet.
//!
//! Every layer reads its weights from the tape's parameter store by name, so
//! the same functions serve pretraining, transfer and gradient checks.
//! Linear weights are stored `[in, out]` and applied as `x @ W + b`.

use std::sync::Arc;

use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;

use crate::error::{Error, Result};
use crate::geometry::{self, GridVar};
use crate::tensor::{ParamStore, Tape, Tensor, Var};

pub const LN_EPS: f64 = 1e-5;
pub const MLP_RATIO: usize = 4;
const INIT_STD: f64 = 0.02;

/// Seeded parameter factory.
pub struct Init<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> Init<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> Self {
        Init {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn normal(&mut self, name: &str, shape: &[usize]) -> Result<()> {
        let t = Tensor::trunc_normal(shape, INIT_STD, &mut self.rng);
        self.store.insert(name, t)
    }

    pub fn constant(&mut self, name: &str, shape: &[usize], v: f64) -> Result<()> {
        self.store.insert(name, Tensor::full(shape, v))
    }

    pub fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize, bias: bool) -> Result<()> {
        self.normal(&format!("{prefix}.weight"), &[d_in, d_out])?;
        if bias {
            self.constant(&format!("{prefix}.bias"), &[d_out], 0.0)?;
        }
        Ok(())
    }

    pub fn norm(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.constant(&format!("{prefix}.weight"), &[dim], 1.0)?;
        self.constant(&format!("{prefix}.bias"), &[dim], 0.0)
    }

    fn mlp(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.linear(&format!("{prefix}.mlp.fc1"), dim, dim * MLP_RATIO, true)?;
        self.linear(&format!("{prefix}.mlp.fc2"), dim * MLP_RATIO, dim, true)
    }

    /// Parameters of one Swin block with a relative-position table sized for
    /// `window`.
    pub fn swin_block(&mut self, prefix: &str, dim: usize, heads: usize, window: usize) -> Result<()> {
        self.norm(&format!("{prefix}.norm1"), dim)?;
        self.linear(&format!("{prefix}.attn.qkv"), dim, 3 * dim, true)?;
        let span = 2 * window - 1;
        self.normal(&format!("{prefix}.attn.relative_position_bias_table"), &[span * span, heads])?;
        self.linear(&format!("{prefix}.attn.proj"), dim, dim, true)?;
        self.norm(&format!("{prefix}.norm2"), dim)?;
        self.mlp(prefix, dim)
    }

    /// Parameters of one global-attention transformer block.
    pub fn vit_block(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.norm(&format!("{prefix}.norm1"), dim)?;
        self.linear(&format!("{prefix}.attn.qkv"), dim, 3 * dim, true)?;
        self.linear(&format!("{prefix}.attn.proj"), dim, dim, true)?;
        self.norm(&format!("{prefix}.norm2"), dim)?;
        self.mlp(prefix, dim)
    }

    /// Patch merging: norm over `4·dim` then bias-free reduction to `2·dim`.
    pub fn merging(&mut self, prefix: &str, dim: usize) -> Result<()> {
        self.norm(&format!("{prefix}.norm"), 4 * dim)?;
        self.linear(&format!("{prefix}.reduction"), 4 * dim, 2 * dim, false)
    }

    /// Patch expanding by `factor` to width `out_dim`: bias-free linear
    /// `dim → factor²·out_dim`, then a norm over `out_dim`.
    pub fn expanding(&mut self, prefix: &str, dim: usize, factor: usize, out_dim: usize) -> Result<()> {
        self.linear(&format!("{prefix}.expand"), dim, factor * factor * out_dim, false)?;
        self.norm(&format!("{prefix}.norm"), out_dim)
    }
}

pub fn linear(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let w = tape.param(&format!("{prefix}.weight"))?;
    let y = tape.matmul(x, w)?;
    let bias = format!("{prefix}.bias");
    if tape.has_param(&bias) {
        let b = tape.param(&bias)?;
        tape.add(y, b)
    } else {
        Ok(y)
    }
}

pub fn layer_norm(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let g = tape.param(&format!("{prefix}.weight"))?;
    let b = tape.param(&format!("{prefix}.bias"))?;
    tape.layer_norm(x, g, b, LN_EPS)
}

fn mlp(tape: &mut Tape<'_>, x: Var, prefix: &str) -> Result<Var> {
    let h = linear(tape, x, &format!("{prefix}.mlp.fc1"))?;
    let h = tape.gelu(h)?;
    linear(tape, h, &format!("{prefix}.mlp.fc2"))
}

/// Relative-position bias for one window size.
pub struct RelativeBias {
    pub table: String,
    pub index: Arc<Vec<usize>>,
}

/// Multi-head self-attention over `x: [N, n, C]`, optionally with a
/// relative-position bias and an additive mask `[nW, n, n]` (N = B·nW).
pub fn attention(
    tape: &mut Tape<'_>,
    x: Var,
    prefix: &str,
    heads: usize,
    bias: Option<&RelativeBias>,
    mask: Option<&Tensor>,
) -> Result<Var> {
    let (nb, n, c) = match tape.shape(x) {
        &[a, b, c] => (a, b, c),
        s => return Err(Error::shape("attention", format!("expected [N, n, C], got {s:?}"))),
    };
    if heads == 0 || c % heads != 0 {
        return Err(Error::shape("attention", format!("{heads} heads do not divide width {c}")));
    }
    let hd = c / heads;
    let qkv = linear(tape, x, &format!("{prefix}.attn.qkv"))?;
    let qkv = tape.reshape(qkv, &[nb, n, 3, heads, hd])?;
    let qkv = tape.permute(qkv, &[2, 0, 3, 1, 4])?;
    let mut parts = [qkv; 3];
    for (i, p) in parts.iter_mut().enumerate() {
        let s = tape.slice(qkv, 0, i, i + 1)?;
        *p = tape.reshape(s, &[nb, heads, n, hd])?;
    }
    let [q, k, v] = parts;
    let q = tape.scale(q, (hd as f64).powf(-0.5))?;
    let kt = tape.transpose_last(k)?;
    let mut attn = tape.matmul(q, kt)?;
    if let Some(rb) = bias {
        let table = tape.param(&rb.table)?;
        if tape.shape(table)[1] != heads {
            return Err(Error::shape("attention", format!("bias table {:?} for {heads} heads", tape.shape(table))));
        }
        let b = tape.index_select(table, 0, rb.index.clone())?;
        let b = tape.reshape(b, &[n, n, heads])?;
        let b = tape.permute(b, &[2, 0, 1])?;
        attn = tape.add(attn, b)?;
    }
    if let Some(m) = mask {
        let nw = m.shape()[0];
        if nb % nw != 0 {
            return Err(Error::shape("attention", format!("{nb} windows vs mask for {nw}")));
        }
        let a5 = tape.reshape(attn, &[nb / nw, nw, heads, n, n])?;
        let m4 = m.clone().reshape(&[nw, 1, n, n])?;
        let a5 = tape.add_mask(a5, &m4)?;
        attn = tape.reshape(a5, &[nb, heads, n, n])?;
    }
    let attn = tape.softmax(attn)?;
    let out = tape.matmul(attn, v)?;
    let out = tape.permute(out, &[0, 2, 1, 3])?;
    let out = tape.reshape(out, &[nb, n, c])?;
    linear(tape, out, &format!("{prefix}.attn.proj"))
}

/// Window side and shift actually used on an `h × w` grid: windows never
/// exceed the grid, and a single window needs no shift.
pub fn effective_window(h: usize, w: usize, window: usize, shifted: bool) -> (usize, usize) {
    let m = h.min(w);
    if m <= window {
        (m, 0)
    } else {
        (window, if shifted { window / 2 } else { 0 })
    }
}

/// Configuration of one Swin block application.
#[derive(Debug, Clone, Copy)]
pub struct BlockCfg {
    pub heads: usize,
    /// Configured window side (sizes the bias table).
    pub window: usize,
    pub shifted: bool,
}

/// Pre-norm Swin block: LN → (S)W-MSA → residual → LN → MLP → residual.
pub fn swin_block(tape: &mut Tape<'_>, g: GridVar, prefix: &str, cfg: BlockCfg) -> Result<GridVar> {
    let (win, shift) = effective_window(g.h, g.w, cfg.window, cfg.shifted);
    if g.h % win != 0 || g.w % win != 0 {
        return Err(Error::shape(
            "swin_block",
            format!("grid {}x{} is not divisible by window {win}", g.h, g.w),
        ));
    }
    let shortcut = g.var;
    let y = layer_norm(tape, g.var, &format!("{prefix}.norm1"))?;
    let mut gy = g.with_var(y, g.dim);
    let mask = if shift > 0 {
        gy = geometry::cyclic_shift(tape, gy, shift)?;
        Some(geometry::shift_attention_mask(g.h, g.w, win, shift)?)
    } else {
        None
    };
    let windows = geometry::window_partition(tape, gy, win)?;
    let bias = RelativeBias {
        table: format!("{prefix}.attn.relative_position_bias_table"),
        index: Arc::new(geometry::relative_position_index_in(win, cfg.window)),
    };
    let att = attention(tape, windows, prefix, cfg.heads, Some(&bias), mask.as_ref())?;
    let mut back = geometry::window_reverse(tape, att, g.batch, g.h, g.w, win)?;
    if shift > 0 {
        back = geometry::cyclic_unshift(tape, back, shift)?;
    }
    let x = tape.add(shortcut, back.var)?;
    let y = layer_norm(tape, x, &format!("{prefix}.norm2"))?;
    let y = mlp(tape, y, prefix)?;
    let x = tape.add(x, y)?;
    Ok(g.with_var(x, g.dim))
}

/// A stack of Swin blocks alternating regular and shifted windows.
pub fn swin_stage(
    tape: &mut Tape<'_>,
    mut g: GridVar,
    prefix: &str,
    depth: usize,
    heads: usize,
    window: usize,
) -> Result<GridVar> {
    for j in 0..depth {
        let cfg = BlockCfg {
            heads,
            window,
            shifted: j % 2 == 1,
        };
        g = swin_block(tape, g, &format!("{prefix}.blocks.{j}"), cfg)?;
    }
    Ok(g)
}

/// Pre-norm transformer block with global attention over `[B, L, C]`.
pub fn vit_block(tape: &mut Tape<'_>, x: Var, prefix: &str, heads: usize) -> Result<Var> {
    let y = layer_norm(tape, x, &format!("{prefix}.norm1"))?;
    let y = attention(tape, y, prefix, heads, None, None)?;
    let x = tape.add(x, y)?;
    let y = layer_norm(tape, x, &format!("{prefix}.norm2"))?;
    let y = mlp(tape, y, prefix)?;
    tape.add(x, y)
}

/// Norm + reduction patch merging layer.
pub fn merging_layer(tape: &mut Tape<'_>, g: GridVar, prefix: &str) -> Result<GridVar> {
    let m = geometry::merge_tokens(tape, g)?;
    let y = layer_norm(tape, m.var, &format!("{prefix}.norm"))?;
    let w = tape.param(&format!("{prefix}.reduction.weight"))?;
    let y = tape.matmul(y, w)?;
    let dim = *tape.shape(y).last().expect("rank 3");
    Ok(m.with_var(y, dim))
}

/// Linear + spatial rearrangement + norm patch expanding layer.
pub fn expanding_layer(tape: &mut Tape<'_>, g: GridVar, prefix: &str, factor: usize) -> Result<GridVar> {
    let w = tape.param(&format!("{prefix}.expand.weight"))?;
    let y = tape.matmul(g.var, w)?;
    let dim = *tape.shape(y).last().expect("rank 3");
    let e = geometry::expand_tokens(tape, g.with_var(y, dim), factor)?;
    let z = layer_norm(tape, e.var, &format!("{prefix}.norm"))?;
    Ok(e.with_var(z, e.dim))
}
