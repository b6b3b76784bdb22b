//! Image-side building blocks for backscatter image quality optimization.
//!
//! Everything in this crate operates on [`Image`], a single-channel raster of
//! 16-bit detector units held as `f64`. Synthetic scenes ([`phantom`]) and the
//! additive noise model ([`noise`]) produce training and evaluation corpora,
//! [`n2v`] turns raw images into blind-spot training pairs, [`metrics`] holds
//! the loss and the no-reference quality measures, and [`baselines`] the
//! classical comparison filters.

pub mod baselines;
pub mod error;
pub mod image;
pub mod metrics;
pub mod n2v;
pub mod noise;
pub mod phantom;
pub mod resize;

pub use error::{Error, Result};
pub use image::{Image, MAX_VALUE};
