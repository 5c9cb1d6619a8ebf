//! Separable cubic upsampling by an integer factor (the EXP baseline).
//!
//! Output pixel `o` samples the source at `(o + 0.5) / r - 0.5` with the
//! four-tap cubic Lagrange interpolator, which reproduces cubic polynomials
//! exactly wherever all taps fall inside the image. Taps beyond the border
//! are clamped to the edge pixel.

use crate::error::{Error, Result};
use crate::tensor::{Real, Shape, Tensor};

/// Resolution ratio between PAN and MS images.
pub const RATIO: usize = 4;

fn lagrange_weights(t: f64) -> [f64; 4] {
    [
        -t * (t - 1.0) * (t - 2.0) / 6.0,
        (t + 1.0) * (t - 1.0) * (t - 2.0) / 2.0,
        -(t + 1.0) * t * (t - 2.0) / 2.0,
        (t + 1.0) * t * (t - 1.0) / 6.0,
    ]
}

/// Tap indices and weights for each output coordinate along one axis.
fn axis_taps(src_len: usize, factor: usize) -> Vec<([usize; 4], [f64; 4])> {
    (0..src_len * factor)
        .map(|o| {
            let s = (o as f64 + 0.5) / factor as f64 - 0.5;
            let base = s.floor();
            let w = lagrange_weights(s - base);
            let idx = std::array::from_fn(|k| {
                (base as i64 - 1 + k as i64).clamp(0, src_len as i64 - 1) as usize
            });
            (idx, w)
        })
        .collect()
}

/// Upsample every plane of `ms` by `factor` along both axes.
pub fn upsample<T: Real>(ms: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let s = ms.shape();
    if s.h == 0 || s.w == 0 || factor == 0 {
        return Err(Error::config(format!("cannot upsample {s} by {factor}")));
    }
    let rows = axis_taps(s.h, factor);
    let cols = axis_taps(s.w, factor);
    let (oh, ow) = (s.h * factor, s.w * factor);
    let mut out = Tensor::zeros(Shape::new(s.n, s.c, oh, ow));
    let mut tmp = vec![0.0f64; s.h * ow];
    for n in 0..s.n {
        for c in 0..s.c {
            let src = &ms.item(n)[c * s.plane()..(c + 1) * s.plane()];
            for y in 0..s.h {
                for (x, (idx, w)) in cols.iter().enumerate() {
                    let row = &src[y * s.w..(y + 1) * s.w];
                    tmp[y * ow + x] = (0..4).map(|k| w[k] * row[idx[k]].to_f64().unwrap_or(0.0)).sum();
                }
            }
            let dst = &mut out.item_mut(n)[c * oh * ow..(c + 1) * oh * ow];
            for (y, (idx, w)) in rows.iter().enumerate() {
                for x in 0..ow {
                    let v: f64 = (0..4).map(|k| w[k] * tmp[idx[k] * ow + x]).sum();
                    dst[y * ow + x] = T::lit(v);
                }
            }
        }
    }
    Ok(out)
}

/// Bring a low-resolution MS image to PAN resolution (`x4`).
pub fn upsample_lrms<T: Real>(ms: &Tensor<T>) -> Result<Tensor<T>> {
    upsample(ms, RATIO)
}

/// Upsample to an explicit target size, which must be exactly `x4`.
pub fn upsample_to<T: Real>(ms: &Tensor<T>, h: usize, w: usize) -> Result<Tensor<T>> {
    let s = ms.shape();
    if h % RATIO != 0 || w % RATIO != 0 || h / RATIO != s.h || w / RATIO != s.w {
        return Err(Error::config(format!(
            "target {h}x{w} is not {RATIO}x the {}x{} input",
            s.h, s.w
        )));
    }
    upsample(ms, RATIO)
}
