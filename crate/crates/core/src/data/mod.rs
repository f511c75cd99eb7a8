//! Datasets on disk: synthetic generation, manifests and image files.
//!
//! Layout under a dataset root:
//!
//! ```text
//! unlabeled/u_00000.ppm ...
//! labeled/l_00000.ppm      image
//! labeled/l_00000.pgm      label map (pixel value = class id)
//! ```

pub mod pnm;
pub mod synth;
pub mod triptych;

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::masking::RngState;
use crate::tensor::Tensor;

pub use pnm::{load_image, load_labels, save_image, save_labels};

const UNLABELED_STREAM: u64 = 11;
const LABELED_STREAM: u64 = 12;
const SPLIT_STREAM: u64 = 13;

/// An image with its per-pixel classes (row-major).
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    /// `[C, H, W]` in `[0, 1]`.
    pub image: Tensor,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Unlabeled,
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub image: PathBuf,
    pub label: Option<PathBuf>,
    pub split: Split,
}

/// Every file of a dataset root, sorted by path, with a seeded 80/20
/// train/test split of the labeled entries.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

/// Number of test items for `n` labeled items: a fifth, at least one when
/// there are two or more.
pub fn test_count(n: usize) -> usize {
    if n < 2 {
        0
    } else {
        ((n as f64 * 0.2).round() as usize).max(1)
    }
}

fn sorted_files(dir: &Path, ext: &str) -> Result<Vec<PathBuf>> {
    if !dir.exists() {
        return Ok(Vec::new());
    }
    let mut out = Vec::new();
    for e in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let p = e.map_err(|e| Error::io(dir, e))?.path();
        if p.extension().is_some_and(|x| x == ext) {
            out.push(p);
        }
    }
    out.sort();
    Ok(out)
}

impl DatasetManifest {
    pub fn scan(root: &Path, seed: u64) -> Result<Self> {
        let mut entries: Vec<ManifestEntry> = sorted_files(&root.join("unlabeled"), "ppm")?
            .into_iter()
            .map(|image| ManifestEntry {
                image,
                label: None,
                split: Split::Unlabeled,
            })
            .collect();
        let labeled = sorted_files(&root.join("labeled"), "ppm")?;
        let mut order: Vec<usize> = (0..labeled.len()).collect();
        {
            use rand::seq::SliceRandom;
            order.shuffle(RngState::new(seed).split(SPLIT_STREAM).rng());
        }
        let mut is_test = vec![false; labeled.len()];
        for &i in &order[..test_count(labeled.len())] {
            is_test[i] = true;
        }
        for (i, image) in labeled.into_iter().enumerate() {
            let label = image.with_extension("pgm");
            if !label.exists() {
                return Err(Error::invalid(format!("{} has no label map", image.display())));
            }
            entries.push(ManifestEntry {
                image,
                label: Some(label),
                split: if is_test[i] { Split::Test } else { Split::Train },
            });
        }
        if entries.is_empty() {
            return Err(Error::invalid(format!("no images under {}", root.display())));
        }
        Ok(DatasetManifest {
            root: root.to_path_buf(),
            entries,
        })
    }

    pub fn of_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == split)
    }

    /// Unlabeled images for pretraining.
    pub fn load_unlabeled(&self) -> Result<Vec<Tensor>> {
        self.of_split(Split::Unlabeled).map(|e| load_image(&e.image)).collect()
    }

    pub fn load_labeled(&self, split: Split) -> Result<Vec<LabeledSample>> {
        self.of_split(split).map(load_entry).collect()
    }
}

fn load_entry(e: &ManifestEntry) -> Result<LabeledSample> {
    let image = load_image(&e.image)?;
    let path = e.label.as_ref().ok_or_else(|| Error::invalid("entry has no label"))?;
    let (h, w, labels) = load_labels(path)?;
    if image.shape()[1..] != [h, w] {
        return Err(Error::shape(
            "dataset",
            format!("{} is {:?}, its label map {h}x{w}", e.image.display(), image.shape()),
        ));
    }
    Ok(LabeledSample { image, labels })
}

/// In-memory synthetic dataset.
pub struct SyntheticData {
    pub unlabeled: Vec<Tensor>,
    pub labeled: Vec<LabeledSample>,
}

pub fn synthesize(n_unlabeled: usize, n_labeled: usize, size: usize, seed: u64) -> SyntheticData {
    let root = RngState::new(seed);
    let unlabeled = (0..n_unlabeled)
        .map(|i| {
            let mut rng = root.split(UNLABELED_STREAM).split(i as u64);
            let with_tumor = rng.uniform() < 0.5;
            synth::generate_sample(size, with_tumor, &mut rng).0
        })
        .collect();
    let flags = synth::tumor_flags(n_labeled, seed);
    let labeled = (0..n_labeled)
        .map(|i| {
            let mut rng = root.split(LABELED_STREAM).split(i as u64);
            let (image, labels) = synth::generate_sample(size, flags[i], &mut rng);
            LabeledSample { image, labels }
        })
        .collect();
    SyntheticData { unlabeled, labeled }
}

/// Train/test split of labeled samples, matching [`DatasetManifest::scan`]
/// on the written files.
pub fn split_samples(samples: &[LabeledSample], seed: u64) -> (Vec<LabeledSample>, Vec<LabeledSample>) {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.shuffle(RngState::new(seed).split(SPLIT_STREAM).rng());
    let mut is_test = vec![false; samples.len()];
    for &i in &order[..test_count(samples.len())] {
        is_test[i] = true;
    }
    let (mut train, mut test) = (Vec::new(), Vec::new());
    for (s, t) in samples.iter().zip(is_test) {
        if t {
            test.push(s.clone());
        } else {
            train.push(s.clone());
        }
    }
    (train, test)
}

/// Writes a synthetic dataset under `out_dir` and returns its manifest.
pub fn generate_synthetic_dataset(
    n_unlabeled: usize,
    n_labeled: usize,
    size: usize,
    seed: u64,
    out_dir: &Path,
) -> Result<DatasetManifest> {
    if n_unlabeled == 0 && n_labeled == 0 {
        return Err(Error::invalid("nothing to generate"));
    }
    let data = synthesize(n_unlabeled, n_labeled, size, seed);
    for (i, img) in data.unlabeled.iter().enumerate() {
        save_image(&out_dir.join("unlabeled").join(format!("u_{i:05}.ppm")), img)?;
    }
    for (i, s) in data.labeled.iter().enumerate() {
        let stem = out_dir.join("labeled").join(format!("l_{i:05}"));
        save_image(&stem.with_extension("ppm"), &s.image)?;
        save_labels(&stem.with_extension("pgm"), size, size, &s.labels)?;
    }
    DatasetManifest::scan(out_dir, seed)
}
