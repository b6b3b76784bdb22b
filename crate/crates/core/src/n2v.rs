//! Blind-spot (Noise2Void) training pairs.
//!
//! A fixed fraction of pixels is replaced by the value of a random neighbor
//! from the `(2r+1)^2` window around it (center excluded); the untouched raw
//! image is the regression target. Pairs are further augmented with random
//! synchronized flips and additive Gaussian noise on the input.

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::noise::add_gaussian;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct N2VConfig {
    pub mask_fraction: f64,
    pub neighborhood_radius: usize,
    /// Standard deviation, raw units, of the Gaussian noise added to inputs.
    pub aug_gaussian_sigma: f64,
    pub flip_horizontal: bool,
    pub flip_vertical: bool,
    pub noise_on_target: bool,
    /// Restrict the loss to blind-spot pixels.
    pub masked_loss_only: bool,
    pub seed: u64,
}

impl Default for N2VConfig {
    fn default() -> Self {
        Self {
            mask_fraction: 0.10,
            neighborhood_radius: 2,
            aug_gaussian_sigma: 400.0,
            flip_horizontal: true,
            flip_vertical: true,
            noise_on_target: false,
            masked_loss_only: true,
            seed: 0,
        }
    }
}

impl N2VConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.mask_fraction > 0.0 && self.mask_fraction < 1.0) {
            return Err(Error::Config(format!(
                "mask_fraction must be in (0, 1), got {}",
                self.mask_fraction
            )));
        }
        if self.neighborhood_radius < 1 {
            return Err(Error::Config("neighborhood_radius must be >= 1".into()));
        }
        if !(self.aug_gaussian_sigma >= 0.0) {
            return Err(Error::Config("aug_gaussian_sigma must be >= 0".into()));
        }
        Ok(())
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }
}

/// Per-pair seed used by corpus builders, so serial and parallel construction
/// agree: `base_seed XOR pair_index`.
pub fn pair_seed(base_seed: u64, pair_index: u64) -> u64 {
    base_seed ^ pair_index
}

/// Number of blind-spot pixels for an image of `len` pixels.
pub fn mask_count(fraction: f64, len: usize) -> usize {
    (fraction * len as f64).round() as usize
}

/// Boolean raster, `true` at blind-spot pixels.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    width: usize,
    height: usize,
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width * height],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, row: usize, col: usize) -> bool {
        self.bits[row * self.width + col]
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.bits.chunks_exact_mut(self.width) {
            row.reverse();
        }
        out
    }

    pub fn flip_vertical(&self) -> Self {
        let mut bits = Vec::with_capacity(self.bits.len());
        for row in self.bits.chunks_exact(self.width).rev() {
            bits.extend_from_slice(row);
        }
        Self { bits, ..*self }
    }

    /// Mask as an image with 65535 at blind spots, for previews.
    pub fn to_image(&self) -> Image {
        Image::from_vec(
            self.width,
            self.height,
            self.bits
                .iter()
                .map(|&b| if b { crate::MAX_VALUE } else { 0.0 })
                .collect(),
        )
        .expect("mask dims are valid")
    }
}

/// Flips applied to a pair, in the order horizontal then vertical.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Flips {
    pub horizontal: bool,
    pub vertical: bool,
}

impl Flips {
    pub fn apply(&self, img: &Image) -> Image {
        let mut out = img.clone();
        if self.horizontal {
            out = out.flip_horizontal();
        }
        if self.vertical {
            out = out.flip_vertical();
        }
        out
    }

    /// Flips commute and are involutions, so undoing is re-applying.
    pub fn undo(&self, img: &Image) -> Image {
        self.apply(img)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub input: Image,
    pub target: Image,
    pub mask: Mask,
    pub flips: Flips,
}

/// Masks `img` with the RNG seeded from `cfg.seed`.
pub fn mask_pixels(img: &Image, cfg: &N2VConfig) -> Result<(Image, Mask)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    mask_pixels_with(img, cfg, &mut rng)
}

/// Masks exactly `round(fraction * W * H)` distinct pixels, chosen uniformly
/// without replacement. Replacement values always come from the unmasked input.
pub fn mask_pixels_with<R: Rng + ?Sized>(
    img: &Image,
    cfg: &N2VConfig,
    rng: &mut R,
) -> Result<(Image, Mask)> {
    let (height, width) = img.dims();
    if height < 3 || width < 3 {
        return Err(Error::Dimensions {
            width,
            height,
            reason: "blind-spot masking needs at least 3x3 pixels",
        });
    }
    if cfg.neighborhood_radius < 1 {
        return Err(Error::Config("neighborhood_radius must be >= 1".into()));
    }
    let count = mask_count(cfg.mask_fraction, img.len());
    let mut masked = img.clone();
    let mut mask = Mask::empty(width, height);
    if count == 0 {
        return Ok((masked, mask));
    }
    let radius = cfg.neighborhood_radius as isize;
    let mut neighbors = Vec::with_capacity((2 * cfg.neighborhood_radius + 1).pow(2));
    for flat in index::sample(rng, img.len(), count) {
        let (r, c) = ((flat / width) as isize, (flat % width) as isize);
        neighbors.clear();
        for dr in -radius..=radius {
            for dc in -radius..=radius {
                let (nr, nc) = (r + dr, c + dc);
                if (dr, dc) != (0, 0)
                    && nr >= 0
                    && nc >= 0
                    && nr < height as isize
                    && nc < width as isize
                {
                    neighbors.push(nr as usize * width + nc as usize);
                }
            }
        }
        let pick = neighbors[rng.random_range(0..neighbors.len())];
        masked.pixels_mut()[flat] = img.pixels()[pick];
        mask.bits[flat] = true;
    }
    Ok((masked, mask))
}

/// Builds one training pair from a raw image:
/// flips, then blind-spot masking, then Gaussian augmentation of the input
/// (and of the target when `noise_on_target`).
pub fn build_pair(raw: &Image, cfg: &N2VConfig) -> Result<TrainingPair> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let flips = Flips {
        horizontal: cfg.flip_horizontal && rng.random_bool(0.5),
        vertical: cfg.flip_vertical && rng.random_bool(0.5),
    };
    let target = flips.apply(raw);
    let (mut input, mask) = mask_pixels_with(&target, cfg, &mut rng)?;
    add_gaussian(&mut input, cfg.aug_gaussian_sigma, &mut rng);
    let mut target = target;
    if cfg.noise_on_target {
        add_gaussian(&mut target, cfg.aug_gaussian_sigma, &mut rng);
    }
    Ok(TrainingPair {
        input,
        target,
        mask,
        flips,
    })
}
