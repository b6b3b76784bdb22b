//! Classical comparison denoisers: Gaussian smoothing, bilateral filtering and
//! non-local means. Borders are handled by edge replication throughout.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;

/// MAD-to-sigma factor for Gaussian noise.
pub const MAD_TO_SIGMA: f64 = 0.6745;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianParams {
    /// Odd kernel side length.
    pub kernel_size: usize,
    pub sigma: f64,
}

impl Default for GaussianParams {
    fn default() -> Self {
        Self {
            kernel_size: 7,
            sigma: 1.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BilateralParams {
    /// Odd neighborhood diameter; the window is the disk of radius `diameter / 2`.
    pub diameter: usize,
    /// Range standard deviation in raw units.
    pub sigma_color: f64,
    /// Spatial standard deviation in pixels.
    pub sigma_space: f64,
}

impl Default for BilateralParams {
    fn default() -> Self {
        Self {
            diameter: 25,
            sigma_color: 600.0,
            sigma_space: 8.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NlmParams {
    /// Odd patch side length.
    pub patch_size: usize,
    pub search_radius: usize,
    /// Filtering strength `h = h_factor * sigma_hat`.
    pub h_factor: f64,
}

impl Default for NlmParams {
    fn default() -> Self {
        Self {
            patch_size: 7,
            search_radius: 8,
            h_factor: 0.8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct BaselineConfig {
    pub gaussian: GaussianParams,
    pub bilateral: BilateralParams,
    pub nlm: NlmParams,
}

impl BaselineConfig {
    pub fn validate(&self) -> Result<()> {
        let odd = |n: usize| n % 2 == 1;
        if !odd(self.gaussian.kernel_size) || !(self.gaussian.sigma > 0.0) {
            return Err(Error::Config("gaussian needs an odd kernel and sigma > 0".into()));
        }
        if !odd(self.bilateral.diameter)
            || !(self.bilateral.sigma_color > 0.0)
            || !(self.bilateral.sigma_space > 0.0)
        {
            return Err(Error::Config(
                "bilateral needs an odd diameter and positive sigmas".into(),
            ));
        }
        if !odd(self.nlm.patch_size) || self.nlm.search_radius == 0 || !(self.nlm.h_factor > 0.0)
        {
            return Err(Error::Config(
                "nlm needs an odd patch, a positive search radius and h_factor".into(),
            ));
        }
        Ok(())
    }
}

/// Normalized 1-D Gaussian taps for offsets `-radius..=radius`.
pub fn gaussian_kernel_1d(sigma: f64, radius: usize) -> Vec<f64> {
    let r = radius as isize;
    let raw: Vec<f64> = (-r..=r)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Separable Gaussian blur with edge replication.
pub fn gaussian_blur(img: &Image, sigma: f64, radius: usize) -> Image {
    let k = gaussian_kernel_1d(sigma, radius);
    let r = radius as isize;
    let (h, w) = img.dims();
    let horizontal = Image::from_fn(w, h, |row, col| {
        let mut acc = 0.0;
        for (i, wk) in k.iter().enumerate() {
            acc += wk * img.get_clamped(row as isize, col as isize + i as isize - r);
        }
        acc
    })
    .expect("same dims");
    Image::from_fn(w, h, |row, col| {
        let mut acc = 0.0;
        for (i, wk) in k.iter().enumerate() {
            acc += wk * horizontal.get_clamped(row as isize + i as isize - r, col as isize);
        }
        acc
    })
    .expect("same dims")
}

/// 7x7, sigma 1.5 Gaussian smoothing by default.
pub fn gaussian_filter(img: &Image, params: &GaussianParams) -> Image {
    gaussian_blur(img, params.sigma, params.kernel_size / 2)
}

/// Bilateral filter over a disk-shaped window.
///
/// `w(p, q) = exp(-|p-q|^2 / 2 sigma_s^2) * exp(-(I_p - I_q)^2 / 2 sigma_c^2)`,
/// normalized; the range term is evaluated in raw units.
pub fn bilateral_filter(img: &Image, params: &BilateralParams) -> Image {
    let radius = (params.diameter / 2) as isize;
    let space_coeff = -0.5 / (params.sigma_space * params.sigma_space);
    let color_coeff = -0.5 / (params.sigma_color * params.sigma_color);
    let mut window = Vec::new();
    for dy in -radius..=radius {
        for dx in -radius..=radius {
            let d2 = dy * dy + dx * dx;
            if d2 <= radius * radius {
                window.push((dy, dx, (space_coeff * d2 as f64).exp()));
            }
        }
    }
    let (h, w) = img.dims();
    Image::from_fn(w, h, |row, col| {
        let center = img.get(row, col);
        let (mut num, mut den) = (0.0, 0.0);
        for &(dy, dx, ws) in &window {
            let diff = img.get_clamped(row as isize + dy, col as isize + dx) - center;
            let wt = ws * (color_coeff * diff * diff).exp();
            num += wt * diff;
            den += wt;
        }
        center + num / den
    })
    .expect("same dims")
}

/// Robust noise standard deviation from the finest-scale diagonal Haar
/// detail band: `median(|HH|) / 0.6745`, ignoring exactly-zero coefficients.
/// Returns 0 when every coefficient vanishes.
pub fn estimate_sigma(img: &Image) -> Result<f64> {
    let (h, w) = img.dims();
    if h < 8 || w < 8 {
        return Err(Error::Dimensions {
            width: w,
            height: h,
            reason: "sigma estimation needs at least 8x8 pixels",
        });
    }
    let mut detail = Vec::with_capacity((h / 2) * (w / 2));
    for r in (0..h - 1).step_by(2) {
        for c in (0..w - 1).step_by(2) {
            let hh = (img.get(r, c) - img.get(r, c + 1) - img.get(r + 1, c) + img.get(r + 1, c + 1))
                / 2.0;
            if hh != 0.0 {
                detail.push(hh.abs());
            }
        }
    }
    if detail.is_empty() {
        return Ok(0.0);
    }
    Ok(median(&mut detail) / MAD_TO_SIGMA)
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Non-local means with the noise level estimated from the image itself.
pub fn nlm_denoise(img: &Image, params: &NlmParams) -> Result<Image> {
    let sigma = estimate_sigma(img)?;
    Ok(nlm_denoise_with_sigma(img, params, sigma))
}

/// Non-local means for a given noise level.
///
/// Patch distance `d^2` is the mean squared difference over the patch; the
/// weight of a candidate is `exp(-max(d^2 - 2 sigma^2, 0) / h^2)`. Patch
/// distances for each search offset come from a summed-area table.
pub fn nlm_denoise_with_sigma(img: &Image, params: &NlmParams, sigma: f64) -> Image {
    let (h, w) = img.dims();
    let pr = (params.patch_size / 2) as isize;
    let sr = params.search_radius as isize;
    let h2 = (params.h_factor * sigma).powi(2);
    let bias = 2.0 * sigma * sigma;
    let patch_len = (params.patch_size * params.patch_size) as f64;

    // Distance images cover [-pr, h + pr) x [-pr, w + pr).
    let (eh, ew) = (h + 2 * pr as usize, w + 2 * pr as usize);
    let mut num = vec![0.0; h * w];
    let mut den = vec![0.0; h * w];
    let mut sat = vec![0.0; (eh + 1) * (ew + 1)];
    for dy in -sr..=sr {
        for dx in -sr..=sr {
            for y in 0..eh {
                let mut row_sum = 0.0;
                for x in 0..ew {
                    let (py, px) = (y as isize - pr, x as isize - pr);
                    let d = img.get_clamped(py, px) - img.get_clamped(py + dy, px + dx);
                    row_sum += d * d;
                    sat[(y + 1) * (ew + 1) + x + 1] = sat[y * (ew + 1) + x + 1] + row_sum;
                }
            }
            let side = params.patch_size;
            for r in 0..h {
                for c in 0..w {
                    // patch centered on (r, c) spans extended rows r..r+side
                    let (y0, x0, y1, x1) = (r, c, r + side, c + side);
                    let s = sat[y1 * (ew + 1) + x1] - sat[y0 * (ew + 1) + x1]
                        - sat[y1 * (ew + 1) + x0]
                        + sat[y0 * (ew + 1) + x0];
                    let d2 = (s / patch_len).max(0.0);
                    let excess = (d2 - bias).max(0.0);
                    let wt = if h2 > 0.0 {
                        (-excess / h2).exp()
                    } else if excess > 0.0 {
                        0.0
                    } else {
                        1.0
                    };
                    let center = img.get(r, c);
                    let other = img.get_clamped(r as isize + dy, c as isize + dx);
                    num[r * w + c] += wt * (other - center);
                    den[r * w + c] += wt;
                }
            }
        }
    }
    Image::from_fn(w, h, |r, c| {
        let i = r * w + c;
        img.get(r, c) + num[i] / den[i]
    })
    .expect("same dims")
}
