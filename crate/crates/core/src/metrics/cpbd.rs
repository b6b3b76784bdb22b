//! Cumulative probability of blur detection (Narvekar & Karam).
//!
//! The image is mapped to an 8-bit-equivalent scale (divide by 257). Vertical
//! edges come from a thinned horizontal Sobel response. For every edge pixel
//! whose gradient direction is within 22.5 degrees of horizontal, the edge
//! width is the distance between the intensity extrema on either side along
//! the row. Within each 64x64 edge block the blur probability of an edge of
//! width `w` is `1 - exp(-(w / w_jnb)^beta)`, where the just-noticeable width
//! `w_jnb` is 5 for block contrast <= 50 and 3 otherwise. The score is the
//! fraction of measured edges whose probability does not exceed `P_JNB`.

use crate::error::{Error, Result};
use crate::image::Image;

pub const BLOCK_SIZE: usize = 64;
pub const P_JNB: f64 = 0.63;
pub const BETA: f64 = 3.6;
/// A block is an edge block when more than this fraction of its pixels are edges.
pub const EDGE_BLOCK_FRACTION: f64 = 0.002;
const MAX_WIDTH_SEARCH: usize = 100;
const SCALE_TO_8BIT: f64 = 257.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CpbdResult {
    pub score: f64,
    /// No measurable edge was found; `score` is then 1.0 by convention.
    pub no_edges: bool,
    pub edges_measured: usize,
}

pub fn cpbd(img: &Image) -> Result<CpbdResult> {
    let (rows, cols) = img.dims();
    if rows < BLOCK_SIZE || cols < BLOCK_SIZE {
        return Err(Error::Dimensions {
            width: cols,
            height: rows,
            reason: "CPBD needs at least one 64x64 block",
        });
    }
    // Referencing the minimum first keeps integer-valued offsets exact.
    let floor = img.pixels().iter().copied().fold(f64::INFINITY, f64::min);
    let scaled = img.map(|v| (v - floor) / SCALE_TO_8BIT);
    let edges = sobel_vertical_edges(&scaled);
    let widths = edge_widths(&scaled, &edges);

    let mut total = 0usize;
    let mut sharp = 0usize;
    for br in 0..rows / BLOCK_SIZE {
        for bc in 0..cols / BLOCK_SIZE {
            let (r0, c0) = (br * BLOCK_SIZE, bc * BLOCK_SIZE);
            let mut edge_count = 0usize;
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for r in r0..r0 + BLOCK_SIZE {
                for c in c0..c0 + BLOCK_SIZE {
                    edge_count += usize::from(edges[r * cols + c]);
                    let v = scaled.get(r, c);
                    lo = lo.min(v);
                    hi = hi.max(v);
                }
            }
            if edge_count as f64 <= EDGE_BLOCK_FRACTION * (BLOCK_SIZE * BLOCK_SIZE) as f64 {
                continue;
            }
            let contrast = (hi - lo).round();
            let width_jnb = if contrast <= 50.0 { 5.0 } else { 3.0 };
            for r in r0..r0 + BLOCK_SIZE {
                for c in c0..c0 + BLOCK_SIZE {
                    let w = widths[r * cols + c];
                    if w == 0 {
                        continue;
                    }
                    let p = 1.0 - (-(w as f64 / width_jnb).powf(BETA)).exp();
                    total += 1;
                    if p <= P_JNB {
                        sharp += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        return Ok(CpbdResult {
            score: 1.0,
            no_edges: true,
            edges_measured: 0,
        });
    }
    Ok(CpbdResult {
        score: sharp as f64 / total as f64,
        no_edges: false,
        edges_measured: total,
    })
}

/// Thinned vertical-edge map from the horizontal Sobel response.
///
/// A pixel is an edge when its squared response exceeds four times the mean
/// squared response and is a horizontal local maximum.
fn sobel_vertical_edges(img: &Image) -> Vec<bool> {
    let (rows, cols) = img.dims();
    let mut strength = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            let (ri, ci) = (r as isize, c as isize);
            let at = |dr: isize, dc: isize| img.get_clamped(ri + dr, ci + dc);
            let gx = (at(-1, 1) + 2.0 * at(0, 1) + at(1, 1))
                - (at(-1, -1) + 2.0 * at(0, -1) + at(1, -1));
            strength[r * cols + c] = gx * gx;
        }
    }
    let threshold = 4.0 * strength.iter().sum::<f64>() / strength.len() as f64;
    let mut edges = vec![false; rows * cols];
    for r in 0..rows {
        for c in 1..cols - 1 {
            let s = strength[r * cols + c];
            edges[r * cols + c] =
                s > threshold && s > strength[r * cols + c - 1] && s >= strength[r * cols + c + 1];
        }
    }
    edges
}

/// Edge widths (0 where no width was measured).
fn edge_widths(img: &Image, edges: &[bool]) -> Vec<usize> {
    let (rows, cols) = img.dims();
    let tan_22_5 = (std::f64::consts::PI / 8.0).tan();
    let mut widths = vec![0usize; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            if !edges[r * cols + c] {
                continue;
            }
            let (gx, gy) = central_gradient(img, r, c);
            if gx == 0.0 || gy.abs() > tan_22_5 * gx.abs() {
                continue;
            }
            let rising = gx > 0.0;
            let px = |col: usize| img.get(r, col);
            // Walk outward while the profile keeps moving away from the edge.
            let mut left = 0;
            while left < MAX_WIDTH_SEARCH {
                let inner = c as isize - 1 - left as isize;
                let outer = inner - 1;
                if outer < 0 {
                    break;
                }
                let step = px(outer as usize) - px(inner as usize);
                if (rising && step >= 0.0) || (!rising && step <= 0.0) {
                    break;
                }
                left += 1;
            }
            let mut right = 0;
            while right < MAX_WIDTH_SEARCH {
                let inner = c + 1 + right;
                let outer = inner + 1;
                if outer >= cols {
                    break;
                }
                let step = px(outer) - px(inner);
                if (rising && step <= 0.0) || (!rising && step >= 0.0) {
                    break;
                }
                right += 1;
            }
            widths[r * cols + c] = left + right + 2;
        }
    }
    widths
}

fn central_gradient(img: &Image, r: usize, c: usize) -> (f64, f64) {
    let (rows, cols) = img.dims();
    let d = |lo: usize, hi: usize, f: &dyn Fn(usize) -> f64| (f(hi) - f(lo)) / (hi - lo) as f64;
    let gx = d(
        c.saturating_sub(1),
        (c + 1).min(cols - 1),
        &|cc| img.get(r, cc),
    );
    let gy = d(
        r.saturating_sub(1),
        (r + 1).min(rows - 1),
        &|rr| img.get(rr, c),
    );
    (gx, gy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::baselines::gaussian_blur;
    use crate::phantom::{generate_phantom, Primitive, SceneSpec};

    fn bars() -> Image {
        let spec = SceneSpec::new(64, 64, 5000.0).with(Primitive::BarGroup {
            x: 12,
            y: 16,
            bar_width: 4,
            gap: 4,
            count: 5,
            bar_height: 32,
            intensity: 40000.0,
        });
        generate_phantom(&spec, 0).unwrap()
    }

    #[test]
    fn edgeless_convention() {
        let res = cpbd(&Image::filled(64, 64, 1234.0).unwrap()).unwrap();
        assert!(res.no_edges);
        assert_eq!(res.score, 1.0);
    }

    #[test]
    fn sharp_beats_blurred() {
        let sharp = bars();
        let blurred = gaussian_blur(&sharp, 2.0, 6);
        let a = cpbd(&sharp).unwrap();
        let b = cpbd(&blurred).unwrap();
        assert!(!a.no_edges && !b.no_edges);
        assert!(a.score > b.score, "{} vs {}", a.score, b.score);
    }

    #[test]
    fn offset_invariance() {
        let img = bars();
        let a = cpbd(&img).unwrap();
        let b = cpbd(&img.map(|v| v + 2570.0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn too_small() {
        assert!(cpbd(&Image::filled(63, 64, 0.0).unwrap()).is_err());
    }
}
