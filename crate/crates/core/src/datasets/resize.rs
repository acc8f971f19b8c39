use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resampling {
    Nearest,
    #[default]
    Bilinear,
}

/// Source coordinate weights for one output axis: `(i0, i1, w1)` with the
/// sample equal to `(1 - w1)·src[i0] + w1·src[i1]`.
fn axis_taps(input: usize, output: usize, kind: Resampling) -> Vec<(usize, usize, f64)> {
    (0..output)
        .map(|o| match kind {
            // floor(o · in / out) in exact integer arithmetic.
            Resampling::Nearest => {
                let i = o * input / output;
                (i, i, 0.0)
            }
            // Half-pixel centers, clamped at the borders.
            Resampling::Bilinear => {
                if input == output {
                    return (o, o, 0.0);
                }
                let src = ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).max(0.0);
                let i0 = (src.floor() as usize).min(input - 1);
                let i1 = (i0 + 1).min(input - 1);
                let w = if i1 == i0 { 0.0 } else { src - i0 as f64 };
                (i0, i1, w)
            }
        })
        .collect()
}

/// Resizes every plane of `[N, C, H, W]` images to `out_h × out_w`.
pub fn resize(images: &Tensor, out_h: usize, out_w: usize, kind: Resampling) -> Result<Tensor> {
    let [n, c, h, w] = match *images.shape() {
        [a, b, c, d] => [a, b, c, d],
        ref s => return Err(Error::dim(format!("resize expects [N,C,H,W], got {s:?}"))),
    };
    if out_h == 0 || out_w == 0 {
        return Err(Error::dim("resize target must be at least 1x1"));
    }
    if (out_h, out_w) == (h, w) {
        return Ok(images.clone());
    }
    let ty = axis_taps(h, out_h, kind);
    let tx = axis_taps(w, out_w, kind);
    let src = images.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &src[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let v = if kind == Resampling::Nearest {
                    p[y0 * w + x0]
                } else {
                    let top = (1.0 - wx) * p[y0 * w + x0] + wx * p[y0 * w + x1];
                    let bottom = (1.0 - wx) * p[y1 * w + x0] + wx * p[y1 * w + x1];
                    (1.0 - wy) * top + wy * bottom
                };
                out.push(v.clamp(0.0, 1.0));
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

/// Resizes to `low × low` and back up to `high × high`.
pub fn downscale_upscale(images: &Tensor, low: usize, high: usize, kind: Resampling) -> Result<Tensor> {
    if low == 0 || high < low {
        return Err(Error::config(format!("need high >= low >= 1, got low={low}, high={high}")));
    }
    let small = resize(images, low, low, kind)?;
    resize(&small, high, high, kind)
}
