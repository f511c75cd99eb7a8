//! Overlap and boundary metrics for label maps.

use crate::error::{Error, Result};

/// One-vs-rest pixel tallies for a single class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

fn check_maps(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::shape("confusion_counts", format!("{} vs {} pixels", pred.len(), gt.len())));
    }
    if let Some(&bad) = pred.iter().chain(gt).find(|&&v| v >= num_classes) {
        return Err(Error::invalid(format!("label {bad} out of range for {num_classes} classes")));
    }
    Ok(())
}

/// Tallies treating `class` as positive.
pub fn confusion_counts(pred: &[usize], gt: &[usize], class: usize, num_classes: usize) -> Result<ConfusionCounts> {
    check_maps(pred, gt, num_classes)?;
    if class >= num_classes {
        return Err(Error::invalid(format!("class {class} out of range for {num_classes} classes")));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p == class, g == class) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Counts for every class, indexed by class id.
pub fn all_counts(pred: &[usize], gt: &[usize], num_classes: usize) -> Result<Vec<ConfusionCounts>> {
    (0..num_classes)
        .map(|c| confusion_counts(pred, gt, c, num_classes))
        .collect()
}

/// Dice, pixel accuracy and IoU as fractions in `[0, 1]`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AreaMetrics {
    pub dsc: f64,
    pub mpa: f64,
    pub miou: f64,
}

/// Per-class values. A class absent from both maps scores 1.
pub fn class_metrics(c: &ConfusionCounts) -> AreaMetrics {
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            1.0
        } else {
            num as f64 / den as f64
        }
    };
    AreaMetrics {
        dsc: ratio(2 * c.tp, c.fp + 2 * c.tp + c.fn_),
        mpa: ratio(c.tp + c.tn, c.total()),
        miou: ratio(c.tp, c.fn_ + c.tp + c.fp),
    }
}

/// Macro average over foreground classes (every class but 0).
pub fn area_metrics(counts: &[ConfusionCounts]) -> Result<AreaMetrics> {
    if counts.len() < 2 {
        return Err(Error::invalid("need at least one foreground class"));
    }
    let fg = &counts[1..];
    let mut m = AreaMetrics::default();
    for c in fg {
        let x = class_metrics(c);
        m.dsc += x.dsc;
        m.mpa += x.mpa;
        m.miou += x.miou;
    }
    let n = fg.len() as f64;
    Ok(AreaMetrics {
        dsc: m.dsc / n,
        mpa: m.mpa / n,
        miou: m.miou / n,
    })
}

/// Pixel coordinate `(row, col)`.
pub type Point = (usize, usize);

fn sq_dist(a: Point, b: Point) -> u64 {
    let dr = a.0.abs_diff(b.0) as u64;
    let dc = a.1.abs_diff(b.1) as u64;
    dr * dr + dc * dc
}

/// Directed distance: the farthest point of `a` from its nearest point in
/// `b`.
pub fn directed_hausdorff(a: &[Point], b: &[Point]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::invalid("Hausdorff distance of an empty point set"));
    }
    let worst = a
        .iter()
        .map(|&p| b.iter().map(|&q| sq_dist(p, q)).min().expect("nonempty"))
        .max()
        .expect("nonempty");
    Ok((worst as f64).sqrt())
}

/// Symmetric Hausdorff distance.
pub fn hausdorff(a: &[Point], b: &[Point]) -> Result<f64> {
    Ok(directed_hausdorff(a, b)?.max(directed_hausdorff(b, a)?))
}

/// Pixels of `class` in a row-major map of width `w`.
pub fn class_points(map: &[usize], w: usize, class: usize) -> Vec<Point> {
    map.iter()
        .enumerate()
        .filter(|(_, &v)| v == class)
        .map(|(i, _)| (i / w, i % w))
        .collect()
}

/// Per-class Hausdorff outcome.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClassDistance {
    Defined(f64),
    /// Class absent from both maps.
    Absent,
    /// Present in only one map.
    Undefined,
}

pub fn class_hausdorff(pred: &[usize], gt: &[usize], w: usize, class: usize) -> Result<ClassDistance> {
    let a = class_points(pred, w, class);
    let b = class_points(gt, w, class);
    Ok(match (a.is_empty(), b.is_empty()) {
        (true, true) => ClassDistance::Absent,
        (false, false) => ClassDistance::Defined(hausdorff(&a, &b)?),
        _ => ClassDistance::Undefined,
    })
}
