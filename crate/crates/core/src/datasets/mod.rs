//! Labeled image sets, synthetic generators, resolution transforms and
//! augmentation.

mod augment;
mod io;
mod resize;
mod synthetic;

pub use augment::{augment, center_crop, eval_transform, hflip, AugmentPolicy};
pub use io::{load, read_dataset, save, write_dataset};
pub use resize::{downscale_upscale, resize, Resampling};
pub use synthetic::{make_blobs, make_single_pixel, templates_for, SyntheticSpec};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::Fnv1a;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

/// How a dataset's accuracy is scored.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    Top1,
    MeanPerClass,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    /// `[N, C, H, W]`, every value in `[0, 1]`.
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub split: Split,
    pub metric_kind: MetricKind,
    pub class_count: usize,
    /// Horizontal flips change the label semantics.
    pub orientation_sensitive: bool,
}

/// Train and test halves of one task.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: Dataset,
    pub test: Dataset,
}

impl Dataset {
    pub fn new(
        name: impl Into<String>,
        images: Tensor,
        labels: Vec<usize>,
        split: Split,
        metric_kind: MetricKind,
        class_count: usize,
    ) -> Result<Self> {
        let ds = Dataset {
            name: name.into(),
            images,
            labels,
            split,
            metric_kind,
            class_count,
            orientation_sensitive: false,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn with_orientation_sensitive(mut self, flag: bool) -> Self {
        self.orientation_sensitive = flag;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.shape().len() != 4 {
            return Err(Error::dim(format!("images must be [N,C,H,W], got {:?}", self.images.shape())));
        }
        if self.images.shape()[0] != self.labels.len() {
            return Err(Error::dim(format!(
                "{} images but {} labels",
                self.images.shape()[0],
                self.labels.len()
            )));
        }
        if self.class_count < 2 {
            return Err(Error::config("class_count must be at least 2"));
        }
        if let Some((i, y)) = self.labels.iter().enumerate().find(|(_, &y)| y >= self.class_count) {
            return Err(Error::Index(format!(
                "record {i}: label {y} outside [0, {})",
                self.class_count
            )));
        }
        if let Some(i) = self.images.data().iter().position(|v| !(0.0..=1.0).contains(v)) {
            let row = i / self.images.row_len();
            return Err(Error::contract(format!("record {row}: pixel value outside [0, 1]")));
        }
        if self.split == Split::Train {
            let mut seen = vec![false; self.class_count];
            for &y in &self.labels {
                seen[y] = true;
            }
            if let Some(c) = seen.iter().position(|s| !s) {
                return Err(Error::contract(format!("class {c} has no training samples")));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// `(channels, height, width)`.
    pub fn geometry(&self) -> (usize, usize, usize) {
        let s = self.images.shape();
        (s[1], s[2], s[3])
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let x = self.images.select_rows(indices)?;
        let y = indices.iter().map(|&i| self.labels[i]).collect();
        Ok((x, y))
    }

    /// Same labels and metadata over a new image tensor.
    pub fn with_images(&self, images: Tensor) -> Result<Dataset> {
        let ds = Dataset { images, ..self.clone() };
        ds.validate()?;
        Ok(ds)
    }

    /// FNV-1a over shape, pixel bits, labels and class count.
    pub fn content_hash(&self) -> u64 {
        let mut h = Fnv1a::new();
        for d in self.images.shape() {
            h.update(&(*d as u64).to_le_bytes());
        }
        h.update_f64s(self.images.data());
        for &y in &self.labels {
            h.update(&(y as u32).to_le_bytes());
        }
        h.update(&(self.class_count as u64).to_le_bytes());
        h.finish()
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.class_count];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}
