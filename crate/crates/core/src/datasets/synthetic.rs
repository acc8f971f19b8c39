//! Synthetic tasks.
//!
//! `SinglePixel`: two classes, pixel (0,0) of channel 0 equals `delta·y`,
//! every other pixel is zero. The two class images sit exactly `delta` apart.
//!
//! `Blobs`: each class has a template image; templates are `0.5` plus a
//! signed bump on a class-private periodic texture, scaled so that every pair of
//! templates is exactly `margin` apart in L2. Samples add isotropic Gaussian
//! noise and clamp to `[0, 1]`.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{Dataset, MetricKind, Split, SplitPair};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SyntheticSpec {
    SinglePixel {
        delta: f64,
        /// Samples per class before the 50/50 train/test split.
        n_per_class: usize,
        channels: usize,
        size: usize,
        seed: u64,
    },
    Blobs {
        class_count: usize,
        n_per_class: usize,
        channels: usize,
        size: usize,
        margin: f64,
        sigma: f64,
        seed: u64,
        #[serde(default = "default_metric")]
        metric_kind: MetricKind,
    },
}

fn default_metric() -> MetricKind {
    MetricKind::Top1
}

impl SyntheticSpec {
    pub fn generate(&self, name: &str) -> Result<SplitPair> {
        match self {
            SyntheticSpec::SinglePixel { .. } => make_single_pixel(self, name),
            SyntheticSpec::Blobs { .. } => make_blobs(self, name),
        }
    }
}

/// Stratified 50/50 split: per class, a seeded shuffle sends the first
/// `ceil(n/2)` indices to train.
fn stratified_split(labels: &[usize], class_count: usize, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut test = Vec::new();
    for c in 0..class_count {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        idx.shuffle(rng);
        let cut = idx.len().div_ceil(2);
        train.extend_from_slice(&idx[..cut]);
        test.extend_from_slice(&idx[cut..]);
    }
    train.sort_unstable();
    test.sort_unstable();
    (train, test)
}

fn split_pair(
    name: &str,
    images: Tensor,
    labels: Vec<usize>,
    class_count: usize,
    metric_kind: MetricKind,
    orientation_sensitive: bool,
    rng: &mut ChaCha8Rng,
) -> Result<SplitPair> {
    let (tr, te) = stratified_split(&labels, class_count, rng);
    let make = |idx: &[usize], split| -> Result<Dataset> {
        let x = images.select_rows(idx)?;
        let y = idx.iter().map(|&i| labels[i]).collect();
        Ok(Dataset::new(name, x, y, split, metric_kind, class_count)?.with_orientation_sensitive(orientation_sensitive))
    };
    let train = make(&tr, Split::Train)?;
    let test = if te.is_empty() {
        // Nothing left over for a test half; evaluate on the training images.
        Dataset { split: Split::Test, ..train.clone() }
    } else {
        make(&te, Split::Test)?
    };
    Ok(SplitPair { train, test })
}

pub fn make_single_pixel(spec: &SyntheticSpec, name: &str) -> Result<SplitPair> {
    let &SyntheticSpec::SinglePixel { delta, n_per_class, channels, size, seed } = spec else {
        return Err(Error::config("make_single_pixel needs a SinglePixel spec"));
    };
    if !(delta > 0.0 && delta <= 1.0) {
        return Err(Error::config(format!("delta must lie in (0, 1], got {delta}")));
    }
    if n_per_class == 0 || channels == 0 || size == 0 {
        return Err(Error::config("n_per_class, channels and size must be positive"));
    }
    let per_image = channels * size * size;
    let n = 2 * n_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % 2).collect();
    let mut data = vec![0.0; n * per_image];
    for (i, &y) in labels.iter().enumerate() {
        data[i * per_image] = delta * y as f64;
    }
    let images = Tensor::new(vec![n, channels, size, size], data)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    split_pair(name, images, labels, 2, MetricKind::Top1, true, &mut rng)
}

/// Class templates for a blobs spec, `[class_count, C, H, W]`.
pub(crate) fn blob_templates(
    class_count: usize,
    channels: usize,
    size: usize,
    margin: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let per_image = channels * size * size;
    if class_count < 2 {
        return Err(Error::config("blobs need class_count >= 2"));
    }
    if !(margin > 0.0) {
        return Err(Error::config(format!("margin must be positive, got {margin}")));
    }
    if per_image < class_count {
        return Err(Error::config("fewer pixels than classes"));
    }
    // Pixels are grouped by (channel, row parity, column parity), so each
    // class owns a periodic texture that small convolutions can detect
    // anywhere in the image. With more classes than textures, single pixels
    // are dealt out instead.
    let keys = if size >= 2 { channels * 4 } else { 0 };
    let key_of = |p: usize| {
        let (c, y, x) = (p / (size * size), (p / size) % size, p % size);
        c * 4 + (y % 2) * 2 + x % 2
    };
    let groups: Vec<Vec<usize>> = if class_count <= keys {
        let mut order: Vec<usize> = (0..keys).collect();
        order.shuffle(rng);
        (0..class_count)
            .map(|c| {
                let owned: Vec<usize> = order.iter().copied().skip(c).step_by(class_count).collect();
                (0..per_image).filter(|&p| owned.contains(&key_of(p))).collect()
            })
            .collect()
    } else {
        let mut pixels: Vec<usize> = (0..per_image).collect();
        pixels.shuffle(rng);
        (0..class_count).map(|c| pixels.iter().copied().skip(c).step_by(class_count).collect()).collect()
    };
    let mut data = vec![0.5; class_count * per_image];
    for (c, group) in groups.into_iter().enumerate() {
        let amp = margin / (2.0f64.sqrt() * (group.len() as f64).sqrt());
        if amp > 0.5 {
            return Err(Error::config(format!(
                "margin {margin} does not fit in [0,1] images with {} pixels per class",
                group.len()
            )));
        }
        let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
        for p in group {
            data[c * per_image + p] = 0.5 + sign * amp;
        }
    }
    Tensor::new(vec![class_count, channels, size, size], data)
}

pub fn make_blobs(spec: &SyntheticSpec, name: &str) -> Result<SplitPair> {
    let &SyntheticSpec::Blobs { class_count, n_per_class, channels, size, margin, sigma, seed, metric_kind } = spec
    else {
        return Err(Error::config("make_blobs needs a Blobs spec"));
    };
    if n_per_class == 0 || channels == 0 || size == 0 {
        return Err(Error::config("n_per_class, channels and size must be positive"));
    }
    if !(sigma >= 0.0) {
        return Err(Error::config(format!("sigma must be non-negative, got {sigma}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let templates = blob_templates(class_count, channels, size, margin, &mut rng)?;
    let per_image = channels * size * size;
    let n = class_count * n_per_class;
    let labels: Vec<usize> = (0..n).map(|i| i % class_count).collect();
    let mut data = Vec::with_capacity(n * per_image);
    for &y in &labels {
        for &t in templates.row(y) {
            let noise: f64 = StandardNormal.sample(&mut rng);
            data.push((t + sigma * noise).clamp(0.0, 1.0));
        }
    }
    let images = Tensor::new(vec![n, channels, size, size], data)?;
    split_pair(name, images, labels, class_count, metric_kind, false, &mut rng)
}

/// Templates used by a blobs spec, regenerated from its seed.
pub fn templates_for(spec: &SyntheticSpec) -> Result<Tensor> {
    let &SyntheticSpec::Blobs { class_count, channels, size, margin, seed, .. } = spec else {
        return Err(Error::config("templates exist only for Blobs specs"));
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    blob_templates(class_count, channels, size, margin, &mut rng)
}
