//! Window masking.
//!
//! The token grid (`d·r` tokens per side) is split into `d × d` windows of
//! `r × r` tokens. Windows, not tokens, are shuffled with uniform noise and the
//! first `floor(d²·(1 - ratio))` of the shuffled order are kept. A kept window
//! with sparse index `x` starts at flat token
//! `y = (x / d)·d·r² + (x mod d)·r`, and its remaining tokens are
//! `y + d·r·i + j` for `0 ≤ i, j < r`.
//!
//! Random masking is the same procedure with unit windows.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::geometry::{GridVar, TokenGrid};
use crate::tensor::{Tape, Tensor, Var};

/// Seedable generator; child streams are derived deterministically.
#[derive(Debug, Clone)]
pub struct RngState {
    seed: u64,
    rng: ChaCha8Rng,
}

/// SplitMix64 finalizer, used to derive child seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(0x632B_E59B_D9B4_E019);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        RngState {
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Independent child generator keyed by `stream`; does not advance `self`.
    pub fn split(&self, stream: u64) -> RngState {
        RngState::new(mix_seed(self.seed, stream))
    }

    /// Child generator keyed by `(epoch, batch)`.
    pub fn for_batch(&self, epoch: usize, batch: usize) -> RngState {
        self.split(mix_seed(epoch as u64, batch as u64))
    }

    pub fn uniform(&mut self) -> f64 {
        self.rng.random::<f64>()
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }
}

/// Masking unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MaskMode {
    /// Whole `r × r` windows.
    #[default]
    Window,
    /// Individual tokens.
    Random,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "window" => Ok(MaskMode::Window),
            "random" => Ok(MaskMode::Random),
            _ => Err(Error::config(format!("unknown mask mode {s:?} (window|random)"))),
        }
    }
}

impl std::fmt::Display for MaskMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            MaskMode::Window => "window",
            MaskMode::Random => "random",
        })
    }
}

/// A concrete masking decision for one token grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPlan {
    /// Windows per side.
    pub d: usize,
    /// Tokens per window side (1 for random masking).
    pub r: usize,
    pub mask_ratio: f64,
    pub mode: MaskMode,
    /// Kept windows' sparse indices, in shuffled order.
    pub sparse_keep: Vec<usize>,
    /// Kept flat token indices, ascending.
    pub keep_indices: Vec<usize>,
    /// Per-token flag, `true` = masked.
    pub mask_flags: Vec<bool>,
    pub seed: u64,
}

/// Flat index of the top-left token of window `x` in a `d × d` window grid
/// with `r × r` windows.
pub fn expand_sparse_index(x: usize, d: usize, r: usize) -> Result<usize> {
    if x >= d * d {
        return Err(Error::invalid(format!("sparse index {x} out of range for {d}x{d} windows")));
    }
    Ok((x / d) * d * r * r + (x % d) * r)
}

/// Number of units kept out of `units` at `mask_ratio` (slice truncation).
pub fn keep_count(units: usize, mask_ratio: f64) -> usize {
    // tolerance absorbs representation error such as 100 * (1 - 0.9)
    ((units as f64) * (1.0 - mask_ratio) + 1e-9).floor() as usize
}

/// Stable argsort of `noise`; ties break by index.
pub fn argsort(noise: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..noise.len()).collect();
    idx.sort_by(|&a, &b| noise[a].total_cmp(&noise[b]).then(a.cmp(&b)));
    idx
}

fn validate(d: usize, r: usize, mask_ratio: f64) -> Result<()> {
    if d == 0 || r == 0 {
        return Err(Error::invalid(format!("window grid d={d}, r={r} must be positive")));
    }
    if !(0.0..1.0).contains(&mask_ratio) {
        return Err(Error::invalid(format!("mask ratio {mask_ratio} outside [0, 1)")));
    }
    Ok(())
}

/// Builds a window plan from an explicit noise vector of length `d²`.
pub fn plan_from_noise(d: usize, r: usize, mask_ratio: f64, noise: &[f64], seed: u64) -> Result<MaskPlan> {
    validate(d, r, mask_ratio)?;
    if noise.len() != d * d {
        return Err(Error::invalid(format!("noise has {} entries, need {}", noise.len(), d * d)));
    }
    let keep = keep_count(d * d, mask_ratio);
    if keep == 0 {
        return Err(Error::invalid(format!(
            "nothing kept: floor({}·(1-{mask_ratio})) = 0",
            d * d
        )));
    }
    let sparse_keep: Vec<usize> = argsort(noise)[..keep].to_vec();
    let mut keep_indices = Vec::with_capacity(keep * r * r);
    for &x in &sparse_keep {
        let top_left = expand_sparse_index(x, d, r)?;
        for i in 0..r {
            for j in 0..r {
                keep_indices.push(top_left + d * r * i + j);
            }
        }
    }
    keep_indices.sort_unstable();
    let side = d * r;
    let mut mask_flags = vec![true; side * side];
    for &k in &keep_indices {
        mask_flags[k] = false;
    }
    Ok(MaskPlan {
        d,
        r,
        mask_ratio,
        mode: MaskMode::Window,
        sparse_keep,
        keep_indices,
        mask_flags,
        seed,
    })
}

/// Draws a plan. In `Random` mode the same grid (`d·r` per side) is masked
/// token by token.
pub fn build_mask_plan(d: usize, r: usize, mask_ratio: f64, rng: &mut RngState, mode: MaskMode) -> Result<MaskPlan> {
    validate(d, r, mask_ratio)?;
    let (d_eff, r_eff) = match mode {
        MaskMode::Window => (d, r),
        MaskMode::Random => (d * r, 1),
    };
    let noise: Vec<f64> = (0..d_eff * d_eff).map(|_| rng.uniform()).collect();
    let mut plan = plan_from_noise(d_eff, r_eff, mask_ratio, &noise, rng.seed())?;
    plan.mode = mode;
    Ok(plan)
}

impl MaskPlan {
    /// A plan that masks nothing.
    pub fn keep_all(d: usize, r: usize) -> Self {
        let n = d * r * d * r;
        MaskPlan {
            d,
            r,
            mask_ratio: 0.0,
            mode: MaskMode::Window,
            sparse_keep: (0..d * d).collect(),
            keep_indices: (0..n).collect(),
            mask_flags: vec![false; n],
            seed: 0,
        }
    }

    /// Tokens per grid side.
    pub fn side(&self) -> usize {
        self.d * self.r
    }

    pub fn num_tokens(&self) -> usize {
        self.mask_flags.len()
    }

    pub fn num_masked(&self) -> usize {
        self.num_tokens() - self.keep_indices.len()
    }

    /// Kept windows (sparse indices), ascending.
    pub fn kept_windows_sorted(&self) -> Vec<usize> {
        let mut w = self.sparse_keep.clone();
        w.sort_unstable();
        w
    }

    /// Per-element mask over an image `[C, H, W]` whose tokens are
    /// `patch_side`-pixel squares.
    pub fn pixel_mask(&self, patch_side: usize, channels: usize) -> Vec<bool> {
        let side = self.side();
        let px = side * patch_side;
        let mut m = Vec::with_capacity(channels * px * px);
        for _ in 0..channels {
            for y in 0..px {
                for x in 0..px {
                    m.push(self.mask_flags[(y / patch_side) * side + x / patch_side]);
                }
            }
        }
        m
    }

    fn check_grid(&self, h: usize, w: usize) -> Result<()> {
        if h != self.side() || w != self.side() {
            return Err(Error::shape(
                "mask_plan",
                format!("plan covers {0}x{0} tokens, grid is {h}x{w}", self.side()),
            ));
        }
        Ok(())
    }

    /// Layout for packing the kept windows into a square grid: kept windows in
    /// ascending sparse order fill a `k × k` window grid row-major. Returns the
    /// gather list (source flat token per packed position) and the packed side
    /// in tokens.
    pub fn packed_layout(&self) -> Result<(Vec<usize>, usize)> {
        let kept = self.kept_windows_sorted();
        let k = (kept.len() as f64).sqrt().round() as usize;
        if k * k != kept.len() {
            return Err(Error::invalid(format!(
                "{} kept windows cannot be packed into a square grid",
                kept.len()
            )));
        }
        let (d, r) = (self.d, self.r);
        let side = k * r;
        let mut idx = vec![0; side * side];
        for (slot, &x) in kept.iter().enumerate() {
            let top_left = expand_sparse_index(x, d, r)?;
            let (pr, pc) = (slot / k * r, slot % k * r);
            for i in 0..r {
                for j in 0..r {
                    idx[(pr + i) * side + pc + j] = top_left + d * r * i + j;
                }
            }
        }
        Ok((idx, side))
    }
}

/// Replaces every masked token with the shared learnable vector
/// `mask_vector: [C]`; token count is unchanged.
pub fn apply_mask_tokens(tape: &mut Tape<'_>, g: GridVar, plan: &MaskPlan, mask_vector: Var) -> Result<GridVar> {
    plan.check_grid(g.h, g.w)?;
    if tape.shape(mask_vector) != [g.dim] {
        return Err(Error::shape(
            "apply_mask_tokens",
            format!("mask vector {:?} vs token dim {}", tape.shape(mask_vector), g.dim),
        ));
    }
    let x = tape.substitute(g.var, mask_vector, Arc::new(plan.mask_flags.clone()))?;
    Ok(g.with_var(x, g.dim))
}

/// Kept tokens only, ascending flat index: `[B, keep, C]`.
pub fn drop_masked_tokens(tape: &mut Tape<'_>, g: GridVar, plan: &MaskPlan) -> Result<Var> {
    plan.check_grid(g.h, g.w)?;
    tape.index_select(g.var, 1, Arc::new(plan.keep_indices.clone()))
}

/// Kept windows packed into a square grid (see [`MaskPlan::packed_layout`]).
pub fn pack_kept_windows(tape: &mut Tape<'_>, g: GridVar, plan: &MaskPlan) -> Result<GridVar> {
    plan.check_grid(g.h, g.w)?;
    let (idx, side) = plan.packed_layout()?;
    let x = tape.index_select(g.var, 1, Arc::new(idx))?;
    GridVar::from_tape(tape, x, side, side)
}

/// Value-level [`apply_mask_tokens`].
pub fn mask_grid(g: &TokenGrid, plan: &MaskPlan, mask_vector: &Tensor) -> Result<TokenGrid> {
    let mut tape = Tape::new();
    let gv = GridVar::load(&mut tape, g);
    let v = tape.constant(mask_vector.clone());
    Ok(apply_mask_tokens(&mut tape, gv, plan, v)?.read(&tape))
}

/// Value-level [`drop_masked_tokens`].
pub fn drop_masked(g: &TokenGrid, plan: &MaskPlan) -> Result<Tensor> {
    let mut tape = Tape::new();
    let gv = GridVar::load(&mut tape, g);
    let v = drop_masked_tokens(&mut tape, gv, plan)?;
    Ok(tape.value(v).clone())
}

/// Inverse of [`drop_masked`]: kept tokens return to their slots, masked
/// slots are filled with `fill`.
pub fn scatter_kept(kept: &Tensor, plan: &MaskPlan, fill: f64) -> Result<TokenGrid> {
    let (b, k, c) = match kept.shape() {
        &[b, k, c] if k == plan.keep_indices.len() => (b, k, c),
        s => return Err(Error::shape("scatter_kept", format!("{s:?} vs {} kept", plan.keep_indices.len()))),
    };
    let n = plan.num_tokens();
    let mut out = vec![fill; b * n * c];
    for bi in 0..b {
        for (j, &t) in plan.keep_indices.iter().enumerate() {
            let src = (bi * k + j) * c;
            let dst = (bi * n + t) * c;
            out[dst..dst + c].copy_from_slice(&kept.data()[src..src + c]);
        }
    }
    TokenGrid::new(plan.side(), plan.side(), Tensor::new(vec![b, n, c], out)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eq2_examples() {
        assert_eq!(expand_sparse_index(0, 3, 5).unwrap(), 0);
        assert_eq!(expand_sparse_index(3, 2, 2).unwrap(), 10);
        assert_eq!(expand_sparse_index(5, 4, 2).unwrap(), 18);
        assert!(expand_sparse_index(4, 2, 2).is_err());
    }

    #[test]
    fn known_noise_example() {
        // windows 0 and 3 get the smallest noise
        let plan = plan_from_noise(2, 2, 0.5, &[0.1, 0.8, 0.9, 0.2], 0).unwrap();
        assert_eq!(plan.sparse_keep, vec![0, 3]);
        assert_eq!(plan.keep_indices, vec![0, 1, 4, 5, 10, 11, 14, 15]);
    }

    #[test]
    fn ratio_zero_keeps_everything() {
        let mut rng = RngState::new(3);
        let plan = build_mask_plan(3, 2, 0.0, &mut rng, MaskMode::Window).unwrap();
        assert_eq!(plan.keep_indices, (0..36).collect::<Vec<_>>());
        assert_eq!(plan.num_masked(), 0);
    }

    #[test]
    fn full_scale_ratio_keeps_twelve_windows() {
        let mut rng = RngState::new(1);
        let plan = build_mask_plan(7, 4, 0.75, &mut rng, MaskMode::Window).unwrap();
        assert_eq!(plan.sparse_keep.len(), 12);
        assert_eq!(plan.keep_indices.len(), 12 * 16);
    }

    #[test]
    fn nothing_kept_is_an_error() {
        let mut rng = RngState::new(0);
        let err = build_mask_plan(1, 4, 0.5, &mut rng, MaskMode::Window).unwrap_err();
        assert!(err.to_string().contains("nothing kept"));
        assert!(build_mask_plan(2, 2, 1.0, &mut rng, MaskMode::Window).is_err());
    }

    #[test]
    fn keep_count_truncates() {
        assert_eq!(keep_count(49, 0.75), 12);
        assert_eq!(keep_count(100, 0.9), 10);
        assert_eq!(keep_count(16, 0.7), 4);
    }

    #[test]
    fn random_mode_uses_unit_windows() {
        let mut rng = RngState::new(5);
        let plan = build_mask_plan(4, 2, 0.75, &mut rng, MaskMode::Random).unwrap();
        assert_eq!((plan.d, plan.r), (8, 1));
        assert_eq!(plan.keep_indices.len(), 16);
    }

    #[test]
    fn ties_break_by_index() {
        assert_eq!(argsort(&[0.5, 0.5, 0.1, 0.5]), vec![2, 0, 1, 3]);
    }

    #[test]
    fn split_streams_are_stable() {
        let root = RngState::new(42);
        let mut a = root.for_batch(3, 1);
        let mut b = root.for_batch(3, 1);
        let mut c = root.for_batch(1, 3);
        let (x, y, z) = (a.uniform(), b.uniform(), c.uniform());
        assert_eq!(x, y);
        assert_ne!(x, z);
    }

    #[test]
    fn mask_tokens_substitute_exactly() {
        let data = Tensor::from_fn(&[1, 16, 3], |i| i as f64 * 0.1);
        let g = TokenGrid::new(4, 4, data).unwrap();
        let v = Tensor::new(vec![3], vec![7.0, -0.0, 1e-3]).unwrap();
        let none = MaskPlan::keep_all(2, 2);
        assert!(mask_grid(&g, &none, &v).unwrap().data.bit_eq(&g.data));

        let plan = plan_from_noise(2, 2, 0.75, &[0.9, 0.1, 0.5, 0.7], 0).unwrap();
        let out = mask_grid(&g, &plan, &v).unwrap();
        for t in 0..16 {
            let tok = &out.data.data()[t * 3..t * 3 + 3];
            if plan.mask_flags[t] {
                assert!(tok.iter().zip(v.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
            } else {
                assert_eq!(tok, &g.data.data()[t * 3..t * 3 + 3]);
            }
        }
        assert!(mask_grid(&g, &plan, &Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn drop_and_scatter_are_inverse_on_kept() {
        let data = Tensor::from_fn(&[2, 16, 2], |i| i as f64);
        let g = TokenGrid::new(4, 4, data).unwrap();
        let plan = plan_from_noise(2, 2, 0.5, &[0.1, 0.8, 0.9, 0.2], 0).unwrap();
        let kept = drop_masked(&g, &plan).unwrap();
        assert_eq!(kept.shape(), &[2, 8, 2]);
        let firsts: Vec<f64> = (0..8).map(|j| kept.data()[j * 2] / 2.0).collect();
        assert_eq!(firsts, vec![0., 1., 4., 5., 10., 11., 14., 15.]);
        let back = scatter_kept(&kept, &plan, f64::NAN).unwrap();
        for b in 0..2 {
            for &t in &plan.keep_indices {
                assert_eq!(back.token(b, t / 4, t % 4), g.token(b, t / 4, t % 4));
            }
        }
        let all = MaskPlan::keep_all(2, 2);
        assert!(drop_masked(&g, &all).unwrap().bit_eq(&g.data));
    }

    #[test]
    fn packing_keeps_window_shape() {
        // 4x4 windows of 2x2 tokens, keep 4 windows -> 4x4 packed tokens
        let noise: Vec<f64> = (0..16).map(|i| [5., 0., 9., 9., 9., 9., 9., 1., 9., 9., 2., 9., 9., 9., 9., 3.][i]).collect();
        let plan = plan_from_noise(4, 2, 0.75, &noise, 0).unwrap();
        let (idx, side) = plan.packed_layout().unwrap();
        assert_eq!(side, 4);
        // kept windows sorted: 1, 7, 10, 15; slot 0 is window 1 -> tokens 2,3,10,11
        assert_eq!(&idx[..2], &[2, 3]);
        assert_eq!(&idx[4..6], &[10, 11]);
        let mut sorted = idx.clone();
        sorted.sort_unstable();
        assert_eq!(sorted, plan.keep_indices);
    }
}
