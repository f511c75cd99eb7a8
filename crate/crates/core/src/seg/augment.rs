//! Fine-tuning augmentations. Geometry changes apply to image and labels
//! alike; intensity changes touch the image only. Nothing crops or rescales.

use rand::Rng;

use crate::data::LabeledSample;
use crate::masking::RngState;
use crate::tensor::Tensor;

pub const MAX_ROTATION_DEG: f64 = 10.0;
pub const MAX_BLUR_SIGMA: f64 = 1.0;
pub const JITTER: f64 = 0.1;

fn dims(s: &LabeledSample) -> (usize, usize, usize) {
    let sh = s.image.shape();
    (sh[0], sh[1], sh[2])
}

pub fn hflip(s: &LabeledSample) -> LabeledSample {
    let (c, h, w) = dims(s);
    let src = s.image.data();
    let mut img = vec![0.0; c * h * w];
    let mut lab = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            for ch in 0..c {
                img[(ch * h + y) * w + x] = src[(ch * h + y) * w + (w - 1 - x)];
            }
            lab[y * w + x] = s.labels[y * w + (w - 1 - x)];
        }
    }
    LabeledSample {
        image: Tensor::new(vec![c, h, w], img).expect("same size"),
        labels: lab,
    }
}

/// Rotation about the image centre; the image is sampled bilinearly, the
/// labels by nearest neighbour, and uncovered pixels become 0 / background.
pub fn rotate(s: &LabeledSample, degrees: f64) -> LabeledSample {
    let (c, h, w) = dims(s);
    let (sin, cos) = degrees.to_radians().sin_cos();
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let src = s.image.data();
    let mut img = vec![0.0; c * h * w];
    let mut lab = vec![0; h * w];
    for y in 0..h {
        for x in 0..w {
            let (dy, dx) = (y as f64 - cy, x as f64 - cx);
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            let (ny, nx) = (sy.round(), sx.round());
            if ny >= 0.0 && nx >= 0.0 && (ny as usize) < h && (nx as usize) < w {
                lab[y * w + x] = s.labels[ny as usize * w + nx as usize];
            }
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            for ch in 0..c {
                let at = |yy: f64, xx: f64| {
                    if yy < 0.0 || xx < 0.0 || yy as usize >= h || xx as usize >= w {
                        0.0
                    } else {
                        src[(ch * h + yy as usize) * w + xx as usize]
                    }
                };
                img[(ch * h + y) * w + x] = (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x0 + 1.0))
                    + fy * ((1.0 - fx) * at(y0 + 1.0, x0) + fx * at(y0 + 1.0, x0 + 1.0));
            }
        }
    }
    LabeledSample {
        image: Tensor::new(vec![c, h, w], img).expect("same size"),
        labels: lab,
    }
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &Tensor, sigma: f64) -> Tensor {
    if sigma < 1e-3 {
        return image.clone();
    }
    let (c, h, w) = (image.shape()[0], image.shape()[1], image.shape()[2]);
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.iter().map(|k| k / norm).collect();
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let src = image.data();
    let mut tmp = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                tmp[(ch * h + y) * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * src[(ch * h + y) * w + clamp(x as isize + k as isize - radius, w)])
                    .sum();
            }
        }
    }
    let mut out = vec![0.0; src.len()];
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out[(ch * h + y) * w + x] = kernel
                    .iter()
                    .enumerate()
                    .map(|(k, kv)| kv * tmp[(ch * h + clamp(y as isize + k as isize - radius, h)) * w + x])
                    .sum();
            }
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same size")
}

/// Per-channel contrast about the channel mean, then brightness gain,
/// clamped to `[0, 1]`.
pub fn color_jitter(image: &Tensor, contrast: f64, brightness: f64) -> Tensor {
    let (c, plane) = (image.shape()[0], image.shape()[1] * image.shape()[2]);
    let mut out = image.data().to_vec();
    for ch in out.chunks_mut(plane).take(c) {
        let mean = ch.iter().sum::<f64>() / plane as f64;
        for v in ch.iter_mut() {
            *v = (((*v - mean) * contrast + mean) * brightness).clamp(0.0, 1.0);
        }
    }
    Tensor::new(image.shape().to_vec(), out).expect("same size")
}

/// Random flip, rotation, blur and color jitter.
pub fn augment(s: &LabeledSample, rng: &mut RngState) -> LabeledSample {
    let r = rng.rng();
    let flip = r.random_bool(0.5);
    let angle = r.random_range(-MAX_ROTATION_DEG..=MAX_ROTATION_DEG);
    let sigma = r.random_range(0.0..=MAX_BLUR_SIGMA);
    let contrast = r.random_range(1.0 - JITTER..=1.0 + JITTER);
    let brightness = r.random_range(1.0 - JITTER..=1.0 + JITTER);
    let mut out = if flip { hflip(s) } else { s.clone() };
    out = rotate(&out, angle);
    out.image = gaussian_blur(&out.image, sigma);
    out.image = color_jitter(&out.image, contrast, brightness);
    out
}
