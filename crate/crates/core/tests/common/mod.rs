//! Straight-line re-implementation of CPBD used as a test oracle.
//!
//! Written loop-for-loop after the published reference procedure (angle
//! quantization to multiples of 45 degrees, margin loops, per-block
//! histogram), sharing no code with the library.

use bsonet_core::Image;

pub fn reference_cpbd(img: &Image) -> f64 {
    let (h, w) = img.dims();
    let lo = img.pixels().iter().cloned().fold(f64::INFINITY, f64::min);
    let f: Vec<Vec<f64>> = (0..h)
        .map(|r| (0..w).map(|c| (img.get(r, c) - lo) / 257.0).collect())
        .collect();
    let px = |r: isize, c: isize| -> f64 {
        f[r.clamp(0, h as isize - 1) as usize][c.clamp(0, w as isize - 1) as usize]
    };

    // horizontal Sobel, squared
    let mut s = vec![vec![0.0; w]; h];
    let mut mean = 0.0;
    for r in 0..h as isize {
        for c in 0..w as isize {
            let g = px(r - 1, c + 1) + 2.0 * px(r, c + 1) + px(r + 1, c + 1)
                - px(r - 1, c - 1)
                - 2.0 * px(r, c - 1)
                - px(r + 1, c - 1);
            s[r as usize][c as usize] = g * g;
            mean += g * g;
        }
    }
    mean /= (h * w) as f64;
    let mut edge = vec![vec![false; w]; h];
    for r in 0..h {
        for c in 1..w - 1 {
            edge[r][c] = s[r][c] > 4.0 * mean && s[r][c] > s[r][c - 1] && s[r][c] >= s[r][c + 1];
        }
    }

    // gradient angles from central differences
    let mut width = vec![vec![0usize; w]; h];
    for r in 0..h {
        for c in 0..w {
            if !edge[r][c] {
                continue;
            }
            let (cl, cr) = (c.saturating_sub(1), (c + 1).min(w - 1));
            let (rl, rr) = (r.saturating_sub(1), (r + 1).min(h - 1));
            let gx = (f[r][cr] - f[r][cl]) / (cr - cl) as f64;
            let gy = (f[rr][c] - f[rl][c]) / (rr - rl) as f64;
            let angle = if gx != 0.0 {
                gy.atan2(gx).to_degrees()
            } else if gy == 0.0 {
                0.0
            } else {
                90.0
            };
            let q = if gx == 0.0 {
                None
            } else if angle.abs() <= 22.5 {
                Some(0)
            } else if angle.abs() >= 157.5 {
                Some(180)
            } else {
                None
            };
            let Some(q) = q else { continue };
            let mut wl = 0;
            for margin in 0..=100usize {
                wl = margin + 1;
                if margin == 100 {
                    wl = margin;
                    break;
                }
                let inner = c as isize - 1 - margin as isize;
                let outer = inner - 1;
                if outer < 0 {
                    break;
                }
                let d = f[r][outer as usize] - f[r][inner as usize];
                if (q == 0 && d >= 0.0) || (q == 180 && d <= 0.0) {
                    break;
                }
            }
            let mut wr = 0;
            for margin in 0..=100usize {
                wr = margin + 1;
                if margin == 100 {
                    wr = margin;
                    break;
                }
                let inner = c + 1 + margin;
                let outer = inner + 1;
                if outer >= w {
                    break;
                }
                let d = f[r][outer] - f[r][inner];
                if (q == 0 && d <= 0.0) || (q == 180 && d >= 0.0) {
                    break;
                }
            }
            width[r][c] = wl + wr;
        }
    }

    let mut total = 0usize;
    let mut sharp = 0usize;
    for bi in 0..h / 64 {
        for bj in 0..w / 64 {
            let rows = bi * 64..(bi + 1) * 64;
            let cols = bj * 64..(bj + 1) * 64;
            let n_edges = rows
                .clone()
                .flat_map(|r| cols.clone().map(move |c| (r, c)))
                .filter(|&(r, c)| edge[r][c])
                .count();
            if (n_edges as f64) <= 64.0 * 64.0 * 0.002 {
                continue;
            }
            let vals: Vec<f64> = rows
                .clone()
                .flat_map(|r| cols.clone().map(move |c| (r, c)))
                .map(|(r, c)| f[r][c])
                .collect();
            let contrast = (vals.iter().cloned().fold(f64::MIN, f64::max)
                - vals.iter().cloned().fold(f64::MAX, f64::min))
            .round();
            let jnb = if contrast <= 50.0 { 5.0 } else { 3.0 };
            for r in rows.clone() {
                for c in cols.clone() {
                    if width[r][c] == 0 {
                        continue;
                    }
                    let p = 1.0 - (-(width[r][c] as f64 / jnb).powf(3.6)).exp();
                    total += 1;
                    if p <= 0.63 {
                        sharp += 1;
                    }
                }
            }
        }
    }
    if total == 0 {
        1.0
    } else {
        sharp as f64 / total as f64
    }
}
