//! Synthetic three-sequence scans with a gland and, in half of them, a
//! tumor inside the gland.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::masking::RngState;
use crate::tensor::Tensor;

pub const BACKGROUND: usize = 0;
pub const GLAND: usize = 1;
pub const TUMOR: usize = 2;

/// Per-channel mean intensity of background, gland and tumor.
const TISSUE: [[f64; 3]; 3] = [[0.15, 0.55, 0.30], [0.10, 0.40, 0.80], [0.25, 0.60, 0.45]];
const NOISE_STD: f64 = 0.04;

#[derive(Debug, Clone, Copy)]
struct Ellipse {
    cx: f64,
    cy: f64,
    a: f64,
    b: f64,
    cos: f64,
    sin: f64,
}

impl Ellipse {
    fn new(cx: f64, cy: f64, a: f64, b: f64, angle: f64) -> Self {
        Ellipse {
            cx,
            cy,
            a,
            b,
            cos: angle.cos(),
            sin: angle.sin(),
        }
    }

    /// Squared normalized radius of pixel centre `(x, y)`.
    fn rho(&self, x: f64, y: f64) -> f64 {
        let (dx, dy) = (x - self.cx, y - self.cy);
        let u = dx * self.cos + dy * self.sin;
        let v = -dx * self.sin + dy * self.cos;
        (u / self.a).powi(2) + (v / self.b).powi(2)
    }

    /// Point at normalized coordinates `(u, v)` of the ellipse frame.
    fn at(&self, u: f64, v: f64) -> (f64, f64) {
        let (x, y) = (u * self.a, v * self.b);
        (self.cx + x * self.cos - y * self.sin, self.cy + x * self.sin + y * self.cos)
    }
}

/// One `3 × size × size` image in `[0, 1]` and its label map.
pub fn generate_sample(size: usize, with_tumor: bool, rng: &mut RngState) -> (Tensor, Vec<usize>) {
    let s = size as f64;
    let r = rng.rng();
    let gland = Ellipse::new(
        r.random_range(0.38..0.62) * s,
        r.random_range(0.38..0.62) * s,
        r.random_range(0.22..0.34) * s,
        r.random_range(0.20..0.30) * s,
        r.random_range(0.0..std::f64::consts::PI),
    );
    let tumor = with_tumor.then(|| {
        let (u, v) = (r.random_range(-0.35..0.35), r.random_range(-0.35..0.35));
        let (cx, cy) = gland.at(u, v);
        let m = gland.a.min(gland.b);
        Ellipse::new(
            cx,
            cy,
            (r.random_range(0.25..0.4) * m).max(1.5),
            (r.random_range(0.25..0.4) * m).max(1.5),
            r.random_range(0.0..std::f64::consts::PI),
        )
    });

    let mut labels = vec![BACKGROUND; size * size];
    for y in 0..size {
        for x in 0..size {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if gland.rho(px, py) <= 1.0 {
                labels[y * size + x] = GLAND;
                if tumor.is_some_and(|t| t.rho(px, py) <= 1.0) {
                    labels[y * size + x] = TUMOR;
                }
            }
        }
    }
    if let Some(t) = tumor.filter(|_| !labels.contains(&TUMOR)) {
        // tiny tumors may miss every pixel centre; keep the nearest gland pixel
        let nearest = (0..size * size)
            .filter(|&i| labels[i] == GLAND)
            .min_by(|&i, &j| {
                let ri = t.rho((i % size) as f64 + 0.5, (i / size) as f64 + 0.5);
                let rj = t.rho((j % size) as f64 + 0.5, (j / size) as f64 + 0.5);
                ri.total_cmp(&rj)
            });
        if let Some(i) = nearest {
            labels[i] = TUMOR;
        }
    }

    let waves: Vec<(f64, f64, f64)> = (0..3)
        .map(|_| {
            (
                r.random_range(0.5..2.0) * std::f64::consts::TAU / s,
                r.random_range(0.5..2.0) * std::f64::consts::TAU / s,
                r.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .collect();
    let gains: Vec<f64> = (0..3).map(|_| r.random_range(0.85..1.15)).collect();
    let noise = Normal::new(0.0, NOISE_STD).expect("valid std");
    let mut data = vec![0.0; 3 * size * size];
    for ch in 0..3 {
        let (fx, fy, ph) = waves[ch];
        for y in 0..size {
            for x in 0..size {
                let i = y * size + x;
                let texture = 0.05 * ((x as f64) * fx + (y as f64) * fy + ph).sin();
                let base = TISSUE[ch][labels[i]] * gains[ch];
                let v = base + texture + noise.sample(r);
                data[ch * size * size + i] = v.clamp(0.0, 1.0);
            }
        }
    }
    (Tensor::new(vec![3, size, size], data).expect("sized buffer"), labels)
}

/// Whether image `i` of `n` labeled images carries a tumor: exactly
/// `ceil(n / 2)` do, chosen by a seeded permutation.
pub fn tumor_flags(n: usize, seed: u64) -> Vec<bool> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(RngState::new(seed).split(17).rng());
    let mut flags = vec![false; n];
    for &i in &idx[..n.div_ceil(2)] {
        flags[i] = true;
    }
    flags
}
