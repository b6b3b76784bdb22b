//! Separable bicubic resampling (cubic convolution kernel, `a = -0.5`).
//!
//! Sample positions follow the half-pixel convention
//! `src = (dst + 0.5) * in / out - 0.5`, taps outside the image replicate the
//! nearest edge pixel, and no low-pass prefilter is applied on downscaling.
//!
//! Each output sample is evaluated as `x[anchor] + sum_k w_k (x[tap_k] - x[anchor])`
//! where `anchor` is the tap nearest the sample position. This equals the
//! textbook `sum_k w_k x[tap_k]` whenever the weights sum to one, and makes
//! constant images and same-size resizes exact in floating point.

use crate::error::{Error, Result};
use crate::image::Image;

pub const CUBIC_A: f64 = -0.5;

/// Cubic convolution kernel.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CUBIC_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Tap indices and weights of one output sample along one axis.
#[derive(Debug, Clone, Copy)]
pub struct Taps {
    pub index: [usize; 4],
    pub weight: [f64; 4],
    pub anchor: usize,
}

/// Taps for every output position of a `in_len -> out_len` resize.
pub fn axis_taps(in_len: usize, out_len: usize) -> Vec<Taps> {
    let scale = in_len as f64 / out_len as f64;
    let last = in_len as isize - 1;
    (0..out_len)
        .map(|o| {
            let src = (o as f64 + 0.5) * scale - 0.5;
            let base = src.floor();
            let t = src - base;
            let base = base as isize;
            let mut index = [0usize; 4];
            let mut weight = [0f64; 4];
            for k in 0..4 {
                let i = base - 1 + k as isize;
                index[k] = i.clamp(0, last) as usize;
                weight[k] = cubic_kernel(t - (k as f64 - 1.0));
            }
            let nearest = if t < 0.5 { base } else { base + 1 };
            Taps {
                index,
                weight,
                anchor: nearest.clamp(0, last) as usize,
            }
        })
        .collect()
}

#[inline]
fn sample(taps: &Taps, at: impl Fn(usize) -> f64) -> f64 {
    let anchor = at(taps.anchor);
    let mut acc = 0.0;
    for k in 0..4 {
        acc += taps.weight[k] * (at(taps.index[k]) - anchor);
    }
    anchor + acc
}

/// Resizes a row-major `height x width` plane to `out_height x out_width`.
pub fn resize_plane(
    src: &[f64],
    height: usize,
    width: usize,
    out_height: usize,
    out_width: usize,
) -> Vec<f64> {
    assert_eq!(src.len(), height * width, "plane size mismatch");
    let horizontal: Vec<f64> = if out_width == width {
        src.to_vec()
    } else {
        let taps = axis_taps(width, out_width);
        let mut out = Vec::with_capacity(height * out_width);
        for row in src.chunks_exact(width) {
            out.extend(taps.iter().map(|t| sample(t, |i| row[i])));
        }
        out
    };
    if out_height == height {
        return horizontal;
    }
    let taps = axis_taps(height, out_height);
    let mut out = Vec::with_capacity(out_height * out_width);
    for t in &taps {
        for c in 0..out_width {
            out.push(sample(t, |r| horizontal[r * out_width + c]));
        }
    }
    out
}

pub fn resize_bicubic(img: &Image, target_height: usize, target_width: usize) -> Result<Image> {
    if target_height == 0 || target_width == 0 {
        return Err(Error::Dimensions {
            width: target_width,
            height: target_height,
            reason: "resize target must be at least 1x1",
        });
    }
    let (h, w) = img.dims();
    Image::from_vec(
        target_width,
        target_height,
        resize_plane(img.pixels(), h, w, target_height, target_width),
    )
}

/// Dense `out_len x in_len` matrix of the one-axis resize, row-major.
///
/// `resize_plane(x) == R_h * X * R_w^T` up to rounding; used for the adjoint.
pub fn interpolation_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    if in_len == out_len {
        for i in 0..in_len {
            m[i * in_len + i] = 1.0;
        }
        return m;
    }
    for (o, t) in axis_taps(in_len, out_len).iter().enumerate() {
        let row = &mut m[o * in_len..(o + 1) * in_len];
        let mut total = 0.0;
        for k in 0..4 {
            row[t.index[k]] += t.weight[k];
            total += t.weight[k];
        }
        row[t.anchor] += 1.0 - total;
    }
    m
}
