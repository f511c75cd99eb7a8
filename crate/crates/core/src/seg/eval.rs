//! Test-set evaluation and reporting.

use std::fmt::Write as _;

use log::warn;

use crate::data::LabeledSample;
use crate::error::{Error, Result};
use crate::parallel::Parallelism;
use crate::train::pretrain::as_batch;

use super::metrics::{all_counts, area_metrics, class_hausdorff, ClassDistance, ConfusionCounts};
use super::unet::SwinUnet;

/// Per-image results.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageResult {
    /// One entry per class.
    pub counts: Vec<ConfusionCounts>,
    /// Mean over foreground classes present in both maps; `None` if no
    /// class qualifies.
    pub hd: Option<f64>,
    /// Foreground classes present in only one map.
    pub hd_undefined: usize,
}

/// Mean metrics over a test set; area metrics are fractions.
#[derive(Debug, Clone, PartialEq)]
pub struct SegReport {
    pub dsc: f64,
    pub mpa: f64,
    pub miou: f64,
    /// Mean over images with a defined distance; NaN when none has one.
    pub hd: f64,
    pub images: Vec<ImageResult>,
}

pub fn image_result(pred: &[usize], gt: &[usize], width: usize, num_classes: usize) -> Result<ImageResult> {
    let counts = all_counts(pred, gt, num_classes)?;
    let mut sum = 0.0;
    let mut n = 0;
    let mut undefined = 0;
    for c in 1..num_classes {
        match class_hausdorff(pred, gt, width, c)? {
            ClassDistance::Defined(d) => {
                sum += d;
                n += 1;
            }
            ClassDistance::Undefined => undefined += 1,
            ClassDistance::Absent => {}
        }
    }
    Ok(ImageResult {
        counts,
        hd: (n > 0).then(|| sum / n as f64),
        hd_undefined: undefined,
    })
}

/// Aggregates per-image results: each image's foreground macro average,
/// then the mean over images.
pub fn aggregate(images: Vec<ImageResult>) -> Result<SegReport> {
    if images.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let (mut dsc, mut mpa, mut miou) = (0.0, 0.0, 0.0);
    let (mut hd, mut hd_n, mut undefined) = (0.0, 0, 0);
    for im in &images {
        let m = area_metrics(&im.counts)?;
        dsc += m.dsc;
        mpa += m.mpa;
        miou += m.miou;
        if let Some(d) = im.hd {
            hd += d;
            hd_n += 1;
        }
        undefined += im.hd_undefined;
    }
    if undefined > 0 {
        warn!("Hausdorff distance undefined for {undefined} image classes (present in only one map); excluded");
    }
    let n = images.len() as f64;
    Ok(SegReport {
        dsc: dsc / n,
        mpa: mpa / n,
        miou: miou / n,
        hd: if hd_n > 0 { hd / hd_n as f64 } else { f64::NAN },
        images,
    })
}

pub fn evaluate_predictions(preds: &[Vec<usize>], gts: &[Vec<usize>], width: usize, num_classes: usize) -> Result<SegReport> {
    if preds.len() != gts.len() {
        return Err(Error::invalid(format!("{} predictions for {} label maps", preds.len(), gts.len())));
    }
    let images = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| image_result(p, g, width, num_classes))
        .collect::<Result<Vec<_>>>()?;
    aggregate(images)
}

pub fn predict_all(net: &SwinUnet, samples: &[LabeledSample], par: Parallelism) -> Result<Vec<Vec<usize>>> {
    par.map(samples, |s| net.predict(&as_batch(&s.image)?))
        .into_iter()
        .collect()
}

pub fn evaluate_segmentation(net: &SwinUnet, samples: &[LabeledSample], par: Parallelism) -> Result<SegReport> {
    if samples.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let preds = predict_all(net, samples, par)?;
    let gts: Vec<Vec<usize>> = samples.iter().map(|s| s.labels.clone()).collect();
    evaluate_predictions(&preds, &gts, samples[0].image.shape()[2], net.spec.num_classes)
}

fn fmt_hd(hd: f64) -> String {
    if hd.is_nan() {
        "nan".into()
    } else {
        format!("{hd:.4}")
    }
}

impl SegReport {
    pub fn pct(&self) -> (f64, f64, f64) {
        (100.0 * self.dsc, 100.0 * self.mpa, 100.0 * self.miou)
    }

    /// `dsc_pct,mpa_pct,miou_pct,hd` values.
    pub fn csv_fields(&self) -> String {
        let (d, m, i) = self.pct();
        format!("{d:.4},{m:.4},{i:.4},{}", fmt_hd(self.hd))
    }

    /// One `image,class,tp,fp,fn,tn` row per image and class.
    pub fn counts_csv(&self) -> String {
        let mut s = String::from("image,class,tp,fp,fn,tn\n");
        for (i, im) in self.images.iter().enumerate() {
            for (c, k) in im.counts.iter().enumerate() {
                writeln!(s, "{i},{c},{},{},{},{}", k.tp, k.fp, k.fn_, k.tn).expect("string write");
            }
        }
        s
    }

    /// Per-image distances, `image,hd` (`nan` when undefined).
    pub fn hd_csv(&self) -> String {
        let mut s = String::from("image,hd\n");
        for (i, im) in self.images.iter().enumerate() {
            writeln!(s, "{i},{}", im.hd.map_or("nan".into(), |d| format!("{d}"))).expect("string write");
        }
        s
    }
}

/// Plain-text table with one row per named report.
pub fn render_table(rows: &[(String, &SegReport)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(6).max(6);
    let mut s = format!(
        "{:<width$}  {:>7}  {:>7}  {:>7}  {:>7}\n",
        "Method", "DSC(%)", "MPA(%)", "MIoU(%)", "HD"
    );
    for (name, r) in rows {
        let (d, m, i) = r.pct();
        writeln!(s, "{name:<width$}  {d:>7.2}  {m:>7.2}  {i:>7.2}  {:>7}", fmt_hd_short(r.hd)).expect("string write");
    }
    s
}

fn fmt_hd_short(hd: f64) -> String {
    if hd.is_nan() {
        "nan".into()
    } else {
        format!("{hd:.2}")
    }
}
