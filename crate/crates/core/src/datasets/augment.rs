use rand::Rng;
use serde::{Deserialize, Serialize};

use super::resize::{resize, Resampling};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Random resized crop followed by an optional horizontal flip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentPolicy {
    /// Side of the square output.
    pub output_size: usize,
    /// Crop area as a fraction of the source area.
    pub scale: (f64, f64),
    /// Crop aspect ratio (width / height).
    pub ratio: (f64, f64),
    pub flip_prob: f64,
}

impl AugmentPolicy {
    pub fn standard(output_size: usize) -> Self {
        AugmentPolicy { output_size, scale: (0.08, 1.0), ratio: (3.0 / 4.0, 4.0 / 3.0), flip_prob: 0.5 }
    }

    pub fn identity(output_size: usize) -> Self {
        AugmentPolicy { output_size, scale: (1.0, 1.0), ratio: (1.0, 1.0), flip_prob: 0.0 }
    }

    /// Same policy with flips disabled when the data cannot be mirrored.
    pub fn for_orientation(&self, orientation_sensitive: bool) -> Self {
        let mut p = self.clone();
        if orientation_sensitive {
            p.flip_prob = 0.0;
        }
        p
    }
}

fn plane_geometry(images: &Tensor) -> Result<[usize; 4]> {
    match *images.shape() {
        [a, b, c, d] => Ok([a, b, c, d]),
        ref s => Err(Error::dim(format!("expected [N,C,H,W], got {s:?}"))),
    }
}

fn crop(image: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Tensor {
    let [n, c, ih, iw] = plane_geometry(image).expect("checked by caller");
    let mut out = Vec::with_capacity(n * c * h * w);
    for plane in 0..n * c {
        for y in top..top + h {
            let base = plane * ih * iw + y * iw;
            out.extend_from_slice(&image.data()[base + left..base + left + w]);
        }
    }
    Tensor::new(vec![n, c, h, w], out).expect("crop inside bounds")
}

/// Mirrors every image left to right.
pub fn hflip(images: &Tensor) -> Tensor {
    let [_, _, _, w] = plane_geometry(images).expect("4-d images");
    let mut out = images.clone();
    for row in out.data_mut().chunks_exact_mut(w) {
        row.reverse();
    }
    out
}

/// Crop box `(top, left, h, w)`: up to ten area/aspect draws, falling back to
/// the central full-size square.
fn sample_box<R: Rng>(h: usize, w: usize, policy: &AugmentPolicy, rng: &mut R) -> (usize, usize, usize, usize) {
    let area = (h * w) as f64;
    let (lr0, lr1) = (policy.ratio.0.ln(), policy.ratio.1.ln());
    for _ in 0..10 {
        let target = area * uniform(rng, policy.scale.0, policy.scale.1);
        let aspect = uniform(rng, lr0, lr1).exp();
        let cw = (target * aspect).sqrt().round() as usize;
        let ch = (target / aspect).sqrt().round() as usize;
        if cw >= 1 && ch >= 1 && cw <= w && ch <= h {
            let top = rng.random_range(0..=h - ch);
            let left = rng.random_range(0..=w - cw);
            return (top, left, ch, cw);
        }
    }
    let side = h.min(w);
    ((h - side) / 2, (w - side) / 2, side, side)
}

fn uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

/// Applies `policy` independently to every image of the batch.
pub fn augment<R: Rng>(batch: &Tensor, policy: &AugmentPolicy, rng: &mut R) -> Result<Tensor> {
    let [n, c, h, w] = plane_geometry(batch)?;
    let out_size = policy.output_size;
    let mut out = Vec::with_capacity(n * c * out_size * out_size);
    for i in 0..n {
        let img = batch.select_rows(&[i])?;
        let (top, left, ch, cw) = sample_box(h, w, policy, rng);
        let mut t = resize(&crop(&img, top, left, ch, cw), out_size, out_size, Resampling::Bilinear)?;
        if policy.flip_prob > 0.0 && rng.random::<f64>() < policy.flip_prob {
            t = hflip(&t);
        }
        out.extend_from_slice(t.data());
    }
    Tensor::new(vec![n, c, out_size, out_size], out)
}

pub fn center_crop(images: &Tensor, size: usize) -> Result<Tensor> {
    let [_, _, h, w] = plane_geometry(images)?;
    if size > h || size > w {
        return Err(Error::dim(format!("center crop {size} exceeds image {h}x{w}")));
    }
    Ok(crop(images, (h - size) / 2, (w - size) / 2, size, size))
}

/// Test-time transform: resize to `round(8/7 · size)`, then center-crop `size`.
pub fn eval_transform(images: &Tensor, size: usize) -> Result<Tensor> {
    let big = ((size as f64) * 8.0 / 7.0).round() as usize;
    let resized = resize(images, big, big, Resampling::Bilinear)?;
    center_crop(&resized, size)
}
