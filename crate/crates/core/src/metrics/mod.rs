//! Loss and image quality measures.

mod cpbd;
mod report;

pub use cpbd::{cpbd, CpbdResult, BETA, BLOCK_SIZE, P_JNB};
pub use report::{summary_table, ImageMetrics, MetricsReport, MetricsSummary};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Image, MAX_VALUE};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Reduction {
    /// Mean of the per-pixel penalty over blind-spot pixels (all pixels when
    /// no mask is given).
    MaskedMean,
    /// Mean of the per-pixel penalty over all pixels.
    FullMean,
    /// `sqrt(||d||^2 + eps^2)` over the whole raster.
    GlobalNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub epsilon: f64,
    pub reduction: Reduction,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-3,
            reduction: Reduction::MaskedMean,
        }
    }
}

/// Charbonnier penalty `sqrt(d^2 + eps^2)`.
#[inline]
pub fn charbonnier(d: f64, epsilon: f64) -> f64 {
    (d * d + epsilon * epsilon).sqrt()
}

/// Charbonnier loss between two rasters of equal length.
///
/// Means are accumulated as `eps + mean(rho - eps)` with
/// `rho - eps = d^2 / (rho + eps)`, so identical rasters give exactly `eps`.
pub fn charbonnier_loss(
    pred: &[f64],
    target: &[f64],
    mask: Option<&[bool]>,
    cfg: &LossConfig,
) -> Result<f64> {
    if !(cfg.epsilon > 0.0) {
        return Err(Error::Config("epsilon must be > 0".into()));
    }
    if pred.len() != target.len() {
        return Err(Error::DimensionMismatch {
            left: (pred.len(), 1),
            right: (target.len(), 1),
        });
    }
    if let Some(m) = mask {
        if m.len() != pred.len() {
            return Err(Error::DimensionMismatch {
                left: (m.len(), 1),
                right: (pred.len(), 1),
            });
        }
    }
    let eps = cfg.epsilon;
    let excess = |p: f64, t: f64| {
        let d = p - t;
        let d2 = d * d;
        d2 / ((d2 + eps * eps).sqrt() + eps)
    };
    let selected = |i: usize| match (cfg.reduction, mask) {
        (Reduction::MaskedMean, Some(m)) => m[i],
        _ => true,
    };
    match cfg.reduction {
        Reduction::GlobalNorm => {
            let ss: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
            Ok(ss / ((ss + eps * eps).sqrt() + eps) + eps)
        }
        Reduction::MaskedMean | Reduction::FullMean => {
            let (mut sum, mut n) = (0.0, 0usize);
            for i in 0..pred.len() {
                if selected(i) {
                    sum += excess(pred[i], target[i]);
                    n += 1;
                }
            }
            if n == 0 {
                return Err(Error::EmptyMask);
            }
            Ok(eps + sum / n as f64)
        }
    }
}

/// Denominator of the local contrast measure, exactly as printed:
/// `8(M-2)(N-2) + 5(2(M-2) + 2(N-2)) + 3*4`.
pub fn local_contrast_denominator(rows: usize, cols: usize) -> f64 {
    let (m, n) = (rows as f64 - 2.0, cols as f64 - 2.0);
    8.0 * m * n + 5.0 * (2.0 * m + 2.0 * n) + 12.0
}

/// Local contrast: root mean squared difference between every pixel and its
/// in-bounds 8-neighbors, in raw units.
///
/// Each unordered neighbor pair is visited once along four directions and
/// counted twice, which equals the ordered-pair sum.
pub fn local_contrast(img: &Image) -> Result<f64> {
    let (rows, cols) = img.dims();
    if rows < 2 || cols < 2 {
        return Err(Error::Dimensions {
            width: cols,
            height: rows,
            reason: "local contrast needs at least 2x2 pixels",
        });
    }
    let px = img.pixels();
    let mut sum = 0.0;
    for r in 0..rows {
        let row = &px[r * cols..(r + 1) * cols];
        for c in 0..cols - 1 {
            let d = row[c] - row[c + 1];
            sum += d * d;
        }
        if r + 1 < rows {
            let below = &px[(r + 1) * cols..(r + 2) * cols];
            for c in 0..cols {
                let d = row[c] - below[c];
                sum += d * d;
                if c + 1 < cols {
                    let d = row[c] - below[c + 1];
                    sum += d * d;
                }
                if c > 0 {
                    let d = row[c] - below[c - 1];
                    sum += d * d;
                }
            }
        }
    }
    Ok((2.0 * sum / local_contrast_denominator(rows, cols)).sqrt())
}

/// `(psnr_db, mse)` in raw units; identical images give `psnr = +inf`.
pub fn psnr_mse(pred: &Image, clean: &Image) -> Result<(f64, f64)> {
    pred.same_dims(clean)?;
    let mse = pred
        .pixels()
        .iter()
        .zip(clean.pixels())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / pred.len() as f64;
    let psnr = if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (MAX_VALUE * MAX_VALUE / mse).log10()
    };
    Ok((psnr, mse))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn charbonnier_zero_error_is_epsilon() {
        let x: Vec<f64> = (0..100).map(|i| i as f64 * 0.37).collect();
        for reduction in [Reduction::MaskedMean, Reduction::FullMean, Reduction::GlobalNorm] {
            let cfg = LossConfig {
                reduction,
                ..LossConfig::default()
            };
            assert_eq!(charbonnier_loss(&x, &x, None, &cfg).unwrap(), 1e-3);
        }
    }

    #[test]
    fn charbonnier_single_pixel() {
        let cfg = LossConfig::default();
        let v = charbonnier_loss(&[1.0], &[0.0], None, &cfg).unwrap();
        assert!((v - (1.0f64 + 1e-6).sqrt()).abs() < 1e-12);
        assert!((v - 1.0000005).abs() < 1e-12);
        let v = charbonnier_loss(&[100.0], &[0.0], None, &cfg).unwrap();
        assert!((v - 100.0).abs() < 1e-8);
    }

    #[test]
    fn charbonnier_masking() {
        let cfg = LossConfig::default();
        let pred = [1.0, 5.0];
        let target = [1.0, 0.0];
        let v = charbonnier_loss(&pred, &target, Some(&[true, false]), &cfg).unwrap();
        assert_eq!(v, 1e-3);
        assert!(matches!(
            charbonnier_loss(&pred, &target, Some(&[false, false]), &cfg),
            Err(Error::EmptyMask)
        ));
        let full = LossConfig {
            reduction: Reduction::FullMean,
            ..cfg
        };
        let v = charbonnier_loss(&pred, &target, Some(&[true, false]), &full).unwrap();
        assert!((v - (1e-3 + charbonnier(5.0, 1e-3)) / 2.0).abs() < 1e-12);
        assert!(charbonnier_loss(&pred, &target[..1], None, &cfg).is_err());
    }

    #[test]
    fn local_contrast_hand_values() {
        let img = Image::filled(9, 7, 300.0).unwrap();
        assert_eq!(local_contrast(&img).unwrap(), 0.0);
        let checker = Image::from_vec(2, 2, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        assert!((local_contrast(&checker).unwrap() - (8.0f64 / 12.0).sqrt()).abs() < 1e-12);
        let mut dot = Image::filled(3, 3, 0.0).unwrap();
        dot.set(1, 1, 1.0);
        assert!((local_contrast(&dot).unwrap() - (16.0f64 / 40.0).sqrt()).abs() < 1e-12);
        assert!(local_contrast(&Image::filled(1, 5, 0.0).unwrap()).is_err());
    }

    #[test]
    fn denominator_counts_ordered_pairs() {
        for rows in 2..7 {
            for cols in 2..7 {
                let mut pairs = 0;
                for r in 0..rows as isize {
                    for c in 0..cols as isize {
                        for dr in -1..=1 {
                            for dc in -1..=1 {
                                let (nr, nc) = (r + dr, c + dc);
                                if (dr, dc) != (0, 0)
                                    && (0..rows as isize).contains(&nr)
                                    && (0..cols as isize).contains(&nc)
                                {
                                    pairs += 1;
                                }
                            }
                        }
                    }
                }
                assert_eq!(local_contrast_denominator(rows, cols), pairs as f64);
            }
        }
    }

    #[test]
    fn psnr_closed_form() {
        let clean = Image::filled(8, 8, 1000.0).unwrap();
        let (psnr, mse) = psnr_mse(&clean, &clean).unwrap();
        assert_eq!(mse, 0.0);
        assert!(psnr.is_infinite() && psnr > 0.0);
        let shifted = clean.map(|v| v + 655.35);
        let (psnr, mse) = psnr_mse(&shifted, &clean).unwrap();
        assert!((mse - 655.35f64 * 655.35).abs() < 1e-6);
        assert!((psnr - 40.0).abs() < 1e-9);
        assert!(psnr_mse(&clean, &Image::filled(8, 9, 0.0).unwrap()).is_err());
    }
}
