//! Datasets: samples, splits, weak-label sampling and the batch stream.
//!
//! On-disk datasets follow the per-category layout
//!
//! ```text
//! <root>/train/good/*.png
//! <root>/test/good/*.png
//! <root>/test/<defect>/*.png
//! <root>/ground_truth/<defect>/<stem>_mask.png
//! ```
//!
//! and synthetic datasets can be exported to the same layout.

mod folder;
pub mod synthetic;

use std::collections::HashSet;

use rand::seq::{IndexedRandom, SliceRandom};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::Mask;
use crate::error::{Error, Result};
use crate::model::Label;
use crate::tensor::Tensor;

pub use folder::{export_folder_dataset, load_folder_dataset};
pub use synthetic::{generate_synthetic, DefectKind, SyntheticConfig, TextureKind};

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    /// `(C,H,W)` in `[0,1]`.
    pub image: Tensor,
    pub label: Label,
    pub mask: Option<Mask>,
    /// Relative path-like identifier, e.g. `test/scratch/007`.
    pub id: String,
}

impl Sample {
    pub fn validate(&self) -> Result<()> {
        let s = self.image.shape();
        if s.len() != 3 {
            return Err(Error::shape(format!("{}: image shape {s:?}", self.id)));
        }
        if let Some(m) = &self.mask {
            if m.height != s[1] || m.width != s[2] {
                return Err(Error::shape(format!(
                    "{}: mask {}x{} vs image {}x{}",
                    self.id, m.height, m.width, s[1], s[2]
                )));
            }
            if self.label == Label::Normal && !m.is_empty() {
                return Err(Error::arg(format!("{}: normal sample with a non-empty mask", self.id)));
            }
        }
        Ok(())
    }

    /// Defect directory name for anomalous samples (`test/<defect>/...`).
    pub fn defect(&self) -> Option<&str> {
        let mut parts = self.id.split('/');
        match (parts.next(), parts.next()) {
            (Some(_), Some(d)) if self.label == Label::Anomalous => Some(d),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct DatasetSplit {
    pub train_normal: Vec<Sample>,
    /// Non-empty only for weakly-supervised training.
    pub train_anomalous: Vec<Sample>,
    pub test: Vec<Sample>,
}

impl DatasetSplit {
    pub fn sizes(&self) -> (usize, usize, usize) {
        (self.train_normal.len(), self.train_anomalous.len(), self.test.len())
    }

    pub fn test_anomalous(&self) -> impl Iterator<Item = &Sample> {
        self.test.iter().filter(|s| s.label == Label::Anomalous)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        for s in self.train_normal.iter().chain(&self.train_anomalous).chain(&self.test) {
            s.validate()?;
            if !seen.insert(s.id.as_str()) {
                return Err(Error::arg(format!("duplicate sample id {}", s.id)));
            }
        }
        if self.train_normal.iter().any(|s| s.label != Label::Normal) {
            return Err(Error::arg("anomalous sample in train_normal"));
        }
        Ok(())
    }

    /// Image shape `(C,H,W)` shared by all samples, if any.
    pub fn image_shape(&self) -> Option<&[usize]> {
        self.train_normal
            .iter()
            .chain(&self.test)
            .next()
            .map(|s| s.image.shape())
    }
}

/// Moves `ceil(fraction * pool)` seeded uniform draws from the anomalous
/// test pool into `train_anomalous`, stripping their masks.
pub fn sample_weak_training(split: &DatasetSplit, fraction: f64, seed: u64) -> Result<DatasetSplit> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::arg(format!("anomalous fraction {fraction} outside (0,1]")));
    }
    let pool: Vec<usize> = split
        .test
        .iter()
        .enumerate()
        .filter(|(_, s)| s.label == Label::Anomalous)
        .map(|(i, _)| i)
        .collect();
    if pool.is_empty() {
        return Err(Error::arg("no anomalous images to draw weak labels from"));
    }
    let take = weak_count(pool.len(), fraction);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let chosen: HashSet<usize> = pool.choose_multiple(&mut rng, take).copied().collect();

    let mut out = DatasetSplit {
        train_normal: split.train_normal.clone(),
        train_anomalous: split.train_anomalous.clone(),
        test: Vec::with_capacity(split.test.len() - take),
    };
    for (i, s) in split.test.iter().enumerate() {
        if chosen.contains(&i) {
            out.train_anomalous.push(Sample {
                mask: None,
                ..s.clone()
            });
        } else {
            out.test.push(s.clone());
        }
    }
    Ok(out)
}

/// `ceil(fraction * pool)`, guarded against float noise just above an
/// integer (0.02 * 100 is 2.0000000000000004).
pub fn weak_count(pool: usize, fraction: f64) -> usize {
    let raw = fraction * pool as f64;
    let rounded = raw.round();
    let n = if (raw - rounded).abs() < 1e-9 { rounded } else { raw.ceil() };
    (n as usize).clamp(1, pool)
}

/// Seeded shuffled batch order for one epoch, as indices into `n` items.
/// The final partial batch is kept.
pub fn batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::arg("batch_size must be >= 1"));
    }
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    order.shuffle(&mut rng);
    Ok(order.chunks(batch_size).map(<[usize]>::to_vec).collect())
}

/// Stacks the images of `samples[indices]` into a `(B,C,H,W)` batch.
pub fn stack_images<'a>(samples: impl IntoIterator<Item = &'a Sample>) -> Result<Tensor> {
    let images: Vec<Tensor> = samples.into_iter().map(|s| s.image.clone()).collect();
    Tensor::stack(&images)
}
