//! Additive measurement noise: `f(x) = u(x) + n(x)`, with `n` a mix of
//! signal-dependent shot noise, zero-mean Gaussian noise and salt-and-pepper
//! impulses. All quantities are in raw detector units.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{clamp_raw, Image, MAX_VALUE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseConfig {
    /// Standard deviation of the additive Gaussian component.
    pub gaussian_sigma: f64,
    /// Probability that a pixel is replaced by 0 or 65535.
    pub impulse_fraction: f64,
    /// 0 disables shot noise; otherwise a pixel becomes
    /// `poisson_scale * Poisson(u / poisson_scale)`.
    pub poisson_scale: f64,
    pub seed: u64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gaussian_sigma: 0.0,
            impulse_fraction: 0.0,
            poisson_scale: 0.0,
            seed: 0,
        }
    }
}

impl NoiseConfig {
    pub fn gaussian(sigma: f64, seed: u64) -> Self {
        Self {
            gaussian_sigma: sigma,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gaussian_sigma >= 0.0) || !self.gaussian_sigma.is_finite() {
            return Err(Error::Config(format!(
                "gaussian_sigma must be >= 0, got {}",
                self.gaussian_sigma
            )));
        }
        if !(0.0..=1.0).contains(&self.impulse_fraction) {
            return Err(Error::Config(format!(
                "impulse_fraction must be in [0, 1], got {}",
                self.impulse_fraction
            )));
        }
        if !(self.poisson_scale >= 0.0) || !self.poisson_scale.is_finite() {
            return Err(Error::Config(format!(
                "poisson_scale must be >= 0, got {}",
                self.poisson_scale
            )));
        }
        Ok(())
    }
}

/// Applies the noise model; the result is clamped to `[0, 65535]`.
///
/// Components are drawn per pixel in row-major order: shot noise, then the
/// Gaussian term, then the impulse test.
pub fn apply_noise(clean: &Image, cfg: &NoiseConfig) -> Result<Image> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let normal = Normal::new(0.0, cfg.gaussian_sigma).expect("validated sigma");
    let mut out = clean.clone();
    for v in out.pixels_mut() {
        let mut f = *v;
        if cfg.poisson_scale > 0.0 {
            let lambda = (f / cfg.poisson_scale).max(0.0);
            f = if lambda > 0.0 {
                let poisson = Poisson::new(lambda).expect("positive finite rate");
                poisson.sample(&mut rng) * cfg.poisson_scale
            } else {
                0.0
            };
        }
        if cfg.gaussian_sigma > 0.0 {
            f += normal.sample(&mut rng);
        }
        if cfg.impulse_fraction > 0.0 && rng.random_bool(cfg.impulse_fraction) {
            f = if rng.random_bool(0.5) { 0.0 } else { MAX_VALUE };
        }
        *v = clamp_raw(f);
    }
    Ok(out)
}

/// Adds unclamped zero-mean Gaussian noise; used for training augmentation
/// where values may leave the on-disk range.
pub fn add_gaussian<R: Rng + ?Sized>(img: &mut Image, sigma: f64, rng: &mut R) {
    if sigma <= 0.0 {
        return;
    }
    let normal = Normal::new(0.0, sigma).expect("positive sigma");
    for v in img.pixels_mut() {
        *v += normal.sample(rng);
    }
}
