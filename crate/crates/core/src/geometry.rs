//! Spatial token machinery: patch partition, patch merging and expanding,
//! window partition, cyclic shift and the shifted-window attention mask.
//!
//! Tokens are laid out row-major over the token grid everywhere:
//! flat index = `row * w_tokens + col`. All rearrangements are expressed as
//! index lists consumed by [`Tape::index_select`], so they are exact and
//! differentiable.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

/// Pixel geometry of the patch partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchSpec {
    pub patch_side: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub channels: usize,
}

impl Default for PatchSpec {
    fn default() -> Self {
        PatchSpec {
            patch_side: 4,
            image_h: 32,
            image_w: 32,
            channels: 3,
        }
    }
}

impl PatchSpec {
    pub fn validate(&self) -> Result<()> {
        let p = self.patch_side;
        if p == 0 || self.channels == 0 || self.image_h == 0 || self.image_w == 0 {
            return Err(Error::config(format!("degenerate patch geometry {self:?}")));
        }
        if self.image_h % p != 0 || self.image_w % p != 0 {
            return Err(Error::shape(
                "patch_partition",
                format!(
                    "image {}x{} is not divisible by patch side {p}",
                    self.image_h, self.image_w
                ),
            ));
        }
        Ok(())
    }

    /// Token grid extents `(h_tokens, w_tokens)`.
    pub fn grid(&self) -> (usize, usize) {
        (self.image_h / self.patch_side, self.image_w / self.patch_side)
    }

    /// Scalars per flattened patch.
    pub fn patch_len(&self) -> usize {
        self.patch_side * self.patch_side * self.channels
    }

    pub fn num_pixels(&self) -> usize {
        self.image_h * self.image_w * self.channels
    }
}

/// A batch of tokens with explicit 2-D layout, as plain values.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenGrid {
    pub batch: usize,
    pub h_tokens: usize,
    pub w_tokens: usize,
    pub dim: usize,
    /// `[batch, h_tokens * w_tokens, dim]`
    pub data: Tensor,
}

impl TokenGrid {
    pub fn new(h_tokens: usize, w_tokens: usize, data: Tensor) -> Result<Self> {
        match data.shape() {
            &[b, l, d] if l == h_tokens * w_tokens => Ok(TokenGrid {
                batch: b,
                h_tokens,
                w_tokens,
                dim: d,
                data,
            }),
            s => Err(Error::shape(
                "token_grid",
                format!("{s:?} is not [B, {h_tokens}*{w_tokens}, C]"),
            )),
        }
    }

    pub fn num_tokens(&self) -> usize {
        self.h_tokens * self.w_tokens
    }

    /// Token `(row, col)` of batch item `b`.
    pub fn token(&self, b: usize, row: usize, col: usize) -> &[f64] {
        let l = row * self.w_tokens + col;
        let start = (b * self.num_tokens() + l) * self.dim;
        &self.data.data()[start..start + self.dim]
    }
}

/// A token grid living on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridVar {
    pub var: Var,
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub dim: usize,
}

impl GridVar {
    pub fn from_tape(tape: &Tape<'_>, var: Var, h: usize, w: usize) -> Result<Self> {
        match tape.shape(var) {
            &[b, l, d] if l == h * w => Ok(GridVar {
                var,
                batch: b,
                h,
                w,
                dim: d,
            }),
            s => Err(Error::shape("grid", format!("{s:?} is not [B, {h}*{w}, C]"))),
        }
    }

    pub fn tokens(&self) -> usize {
        self.h * self.w
    }

    pub fn with_var(self, var: Var, dim: usize) -> Self {
        GridVar { var, dim, ..self }
    }

    pub fn load(tape: &mut Tape<'_>, g: &TokenGrid) -> Self {
        let var = tape.constant(g.data.clone());
        GridVar {
            var,
            batch: g.batch,
            h: g.h_tokens,
            w: g.w_tokens,
            dim: g.dim,
        }
    }

    pub fn read(&self, tape: &Tape<'_>) -> TokenGrid {
        TokenGrid {
            batch: self.batch,
            h_tokens: self.h,
            w_tokens: self.w,
            dim: self.dim,
            data: tape.value(self.var).clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Index maps
// ---------------------------------------------------------------------------

/// Source offsets (into one flattened `[C, H, W]` image) for the patch
/// sequence: tokens row-major, each token laid out as `(py, px, channel)`.
pub fn patch_partition_index(spec: &PatchSpec) -> Result<Vec<usize>> {
    spec.validate()?;
    let (p, h, w, c) = (spec.patch_side, spec.image_h, spec.image_w, spec.channels);
    let (gh, gw) = spec.grid();
    let mut idx = Vec::with_capacity(spec.num_pixels());
    for r in 0..gh {
        for col in 0..gw {
            for py in 0..p {
                for px in 0..p {
                    for ch in 0..c {
                        idx.push(ch * h * w + (r * p + py) * w + col * p + px);
                    }
                }
            }
        }
    }
    Ok(idx)
}

/// Token order that groups each `win × win` window contiguously, windows
/// row-major. Entry `k` is the source flat token index.
pub fn window_partition_index(h: usize, w: usize, win: usize) -> Result<Vec<usize>> {
    if win == 0 || h % win != 0 || w % win != 0 {
        return Err(Error::shape(
            "window_partition",
            format!("grid {h}x{w} is not divisible by window {win}"),
        ));
    }
    let mut idx = Vec::with_capacity(h * w);
    for wr in 0..h / win {
        for wc in 0..w / win {
            for i in 0..win {
                for j in 0..win {
                    idx.push((wr * win + i) * w + wc * win + j);
                }
            }
        }
    }
    Ok(idx)
}

/// Inverse of a permutation.
pub fn invert_permutation(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

/// Gather indices rolling the grid by `(-shift, -shift)`: output `(r, c)`
/// takes source `((r + shift) mod h, (c + shift) mod w)`.
pub fn roll_index(h: usize, w: usize, shift: usize) -> Vec<usize> {
    let mut idx = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            idx.push(((r + shift) % h) * w + (c + shift) % w);
        }
    }
    idx
}

/// Gather indices placing the 2×2 group of every merged token contiguously in
/// the order `(2i,2j), (2i+1,2j), (2i,2j+1), (2i+1,2j+1)`.
pub fn merge_index(h: usize, w: usize) -> Result<Vec<usize>> {
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::shape(
            "patch_merging",
            format!("grid {h}x{w} has an odd extent"),
        ));
    }
    let mut idx = Vec::with_capacity(h * w);
    for i in 0..h / 2 {
        for j in 0..w / 2 {
            for (dr, dc) in [(0, 0), (1, 0), (0, 1), (1, 1)] {
                idx.push((2 * i + dr) * w + 2 * j + dc);
            }
        }
    }
    Ok(idx)
}

/// Gather indices for patch expanding by `factor`: with the
/// `[B, h*w*f², c]` view of the expanded features (sub-position order
/// `(p1, p2)` row-major), output token `(f*i+p1, f*j+p2)` of the `fh × fw`
/// grid reads row `(i*w + j)*f² + f*p1 + p2`.
pub fn expand_index(h: usize, w: usize, factor: usize) -> Vec<usize> {
    let f = factor;
    let (oh, ow) = (f * h, f * w);
    let mut idx = Vec::with_capacity(oh * ow);
    for r in 0..oh {
        for c in 0..ow {
            let (i, p1, j, p2) = (r / f, r % f, c / f, c % f);
            idx.push((i * w + j) * f * f + f * p1 + p2);
        }
    }
    idx
}

/// Relative-position lookup for a `win × win` window: entry `i*n + j` indexes
/// the `(2win-1)²` bias table for the pair (query i, key j).
pub fn relative_position_index(win: usize) -> Vec<usize> {
    relative_position_index_in(win, win)
}

/// Like [`relative_position_index`] for a window of side `win` addressing a
/// table sized for windows of side `table_win >= win`.
pub fn relative_position_index_in(win: usize, table_win: usize) -> Vec<usize> {
    assert!(win <= table_win, "window {win} exceeds table window {table_win}");
    let n = win * win;
    let span = 2 * table_win - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (ri, ci) = (i / win, i % win);
        for j in 0..n {
            let (rj, cj) = (j / win, j % win);
            idx.push((ri + table_win - 1 - rj) * span + (ci + table_win - 1 - cj));
        }
    }
    idx
}

/// Additive attention mask `[nW, n, n]` for shifted windows: 0 where query and
/// key come from the same pre-shift region, `-inf` elsewhere.
pub fn shift_attention_mask(h: usize, w: usize, win: usize, shift: usize) -> Result<Tensor> {
    if shift == 0 || shift >= win {
        return Err(Error::invalid(format!(
            "shift {shift} must satisfy 0 < shift < window {win}"
        )));
    }
    let part = window_partition_index(h, w, win)?;
    let band = |x: usize, extent: usize| -> usize {
        if x < extent - win {
            0
        } else if x < extent - shift {
            1
        } else {
            2
        }
    };
    let region: Vec<usize> = (0..h * w).map(|t| band(t / w, h) * 3 + band(t % w, w)).collect();
    let n = win * win;
    let nw = h * w / n;
    let mut data = vec![0.0; nw * n * n];
    for wi in 0..nw {
        let members = &part[wi * n..(wi + 1) * n];
        for (a, &ta) in members.iter().enumerate() {
            for (b, &tb) in members.iter().enumerate() {
                if region[ta] != region[tb] {
                    data[(wi * n + a) * n + b] = f64::NEG_INFINITY;
                }
            }
        }
    }
    Tensor::new(vec![nw, n, n], data)
}

// ---------------------------------------------------------------------------
// Tape-level operations
// ---------------------------------------------------------------------------

/// Flattened 4×4 (or `patch_side`²) patches of `image: [B, C, H, W]`, as
/// `[B, L, p·p·C]`.
pub fn patchify(tape: &mut Tape<'_>, image: Var, spec: &PatchSpec) -> Result<GridVar> {
    let shape = tape.shape(image).to_vec();
    match shape[..] {
        [_, c, h, w] if c == spec.channels && h == spec.image_h && w == spec.image_w => {}
        _ => {
            return Err(Error::shape(
                "patch_partition",
                format!(
                    "image {shape:?} does not match [B, {}, {}, {}]",
                    spec.channels, spec.image_h, spec.image_w
                ),
            ))
        }
    }
    let idx = patch_partition_index(spec)?;
    let b = shape[0];
    let flat = tape.reshape(image, &[b, spec.num_pixels()])?;
    let g = tape.index_select(flat, 1, Arc::new(idx))?;
    let (gh, gw) = spec.grid();
    let v = tape.reshape(g, &[b, gh * gw, spec.patch_len()])?;
    GridVar::from_tape(tape, v, gh, gw)
}

/// Patch partition followed by the linear embedding
/// (`weight: [p·p·C, E]`, `bias: [E]`).
pub fn patch_partition(
    tape: &mut Tape<'_>,
    image: Var,
    spec: &PatchSpec,
    weight: Var,
    bias: Option<Var>,
) -> Result<GridVar> {
    let g = patchify(tape, image, spec)?;
    let mut y = tape.matmul(g.var, weight)?;
    if let Some(b) = bias {
        y = tape.add(y, b)?;
    }
    let dim = *tape.shape(y).last().expect("rank 3");
    Ok(g.with_var(y, dim))
}

/// Rearranges a grid into `[B, L/4, 4C]` merge groups.
pub fn merge_tokens(tape: &mut Tape<'_>, g: GridVar) -> Result<GridVar> {
    let idx = merge_index(g.h, g.w)?;
    let x = tape.index_select(g.var, 1, Arc::new(idx))?;
    let (h, w) = (g.h / 2, g.w / 2);
    let x = tape.reshape(x, &[g.batch, h * w, 4 * g.dim])?;
    Ok(GridVar {
        var: x,
        batch: g.batch,
        h,
        w,
        dim: 4 * g.dim,
    })
}

/// Merge groups followed by the linear reduction `weight: [4C, 2C]`.
pub fn patch_merging(tape: &mut Tape<'_>, g: GridVar, weight: Var) -> Result<GridVar> {
    let m = merge_tokens(tape, g)?;
    let y = tape.matmul(m.var, weight)?;
    let dim = *tape.shape(y).last().expect("rank 3");
    Ok(m.with_var(y, dim))
}

/// Spreads every token of dim `f²·c` into an `f × f` block of tokens of
/// dim `c`.
pub fn expand_tokens(tape: &mut Tape<'_>, g: GridVar, factor: usize) -> Result<GridVar> {
    let ff = factor * factor;
    if factor == 0 || g.dim % ff != 0 {
        return Err(Error::shape(
            "patch_expanding",
            format!("feature dim {} is not divisible by {ff}", g.dim),
        ));
    }
    let c = g.dim / ff;
    let x = tape.reshape(g.var, &[g.batch, g.tokens() * ff, c])?;
    let x = tape.index_select(x, 1, Arc::new(expand_index(g.h, g.w, factor)))?;
    Ok(GridVar {
        var: x,
        batch: g.batch,
        h: g.h * factor,
        w: g.w * factor,
        dim: c,
    })
}

/// Linear `weight: [C, 2C]` then spatial rearrangement to `(2h, 2w, C/2)`.
pub fn patch_expanding(tape: &mut Tape<'_>, g: GridVar, weight: Var) -> Result<GridVar> {
    if g.dim % 2 != 0 {
        return Err(Error::shape(
            "patch_expanding",
            format!("odd feature dim {}", g.dim),
        ));
    }
    let y = tape.matmul(g.var, weight)?;
    let dim = *tape.shape(y).last().expect("rank 3");
    expand_tokens(tape, g.with_var(y, dim), 2)
}

/// `[B, L, C]` → `[B·nW, win², C]`.
pub fn window_partition(tape: &mut Tape<'_>, g: GridVar, win: usize) -> Result<Var> {
    let idx = window_partition_index(g.h, g.w, win)?;
    let x = tape.index_select(g.var, 1, Arc::new(idx))?;
    let n = win * win;
    tape.reshape(x, &[g.batch * g.tokens() / n, n, g.dim])
}

/// Inverse of [`window_partition`].
pub fn window_reverse(
    tape: &mut Tape<'_>,
    windows: Var,
    batch: usize,
    h: usize,
    w: usize,
    win: usize,
) -> Result<GridVar> {
    let idx = window_partition_index(h, w, win)?;
    let dim = *tape.shape(windows).last().expect("rank 3");
    let x = tape.reshape(windows, &[batch, h * w, dim])?;
    let x = tape.index_select(x, 1, Arc::new(invert_permutation(&idx)))?;
    GridVar::from_tape(tape, x, h, w)
}

/// Rolls the grid by `(-shift, -shift)`.
pub fn cyclic_shift(tape: &mut Tape<'_>, g: GridVar, shift: usize) -> Result<GridVar> {
    let x = tape.index_select(g.var, 1, Arc::new(roll_index(g.h, g.w, shift)))?;
    Ok(g.with_var(x, g.dim))
}

/// Rolls the grid back by `(+shift, +shift)`.
pub fn cyclic_unshift(tape: &mut Tape<'_>, g: GridVar, shift: usize) -> Result<GridVar> {
    let idx = invert_permutation(&roll_index(g.h, g.w, shift));
    let x = tape.index_select(g.var, 1, Arc::new(idx))?;
    Ok(g.with_var(x, g.dim))
}

// ---------------------------------------------------------------------------
// Value-level conveniences
// ---------------------------------------------------------------------------

/// Windows of a grid as `[B·nW, win², C]`.
pub fn partition_windows(g: &TokenGrid, win: usize) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gv = GridVar::load(&mut tape, g);
    let w = window_partition(&mut tape, gv, win)?;
    Ok(tape.value(w).clone())
}

/// Reassembles windows produced by [`partition_windows`].
pub fn reverse_windows(windows: &Tensor, batch: usize, h: usize, w: usize, win: usize) -> Result<TokenGrid> {
    let mut tape = Tape::new();
    let v = tape.constant(windows.clone());
    let g = window_reverse(&mut tape, v, batch, h, w, win)?;
    Ok(g.read(&tape))
}

/// Shifted grid plus the attention mask for its windows.
pub fn cyclic_shift_with_mask(g: &TokenGrid, shift: usize, win: usize) -> Result<(TokenGrid, Tensor)> {
    let mask = shift_attention_mask(g.h_tokens, g.w_tokens, win, shift)?;
    let mut tape = Tape::new();
    let gv = GridVar::load(&mut tape, g);
    let s = cyclic_shift(&mut tape, gv, shift)?;
    Ok((s.read(&tape), mask))
}

/// Undoes [`cyclic_shift_with_mask`].
pub fn cyclic_unshift_grid(g: &TokenGrid, shift: usize) -> Result<TokenGrid> {
    let mut tape = Tape::new();
    let gv = GridVar::load(&mut tape, g);
    let s = cyclic_unshift(&mut tape, gv, shift)?;
    Ok(s.read(&tape))
}
