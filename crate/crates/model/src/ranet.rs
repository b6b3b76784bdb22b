//! Resolution adaptive network: bicubic resize plus a learned correction.
//!
//! ```text
//! up   = bicubic(x, target)
//! f    = act(head(up)); f = act(conv_i(f)) for each body layer
//! f    = channel_attention(f)
//! out  = up + tail(f)
//! ```
//!
//! The tail projection starts at zero, so a fresh network is exactly the
//! bicubic resizer.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, ModelError, Result};
use crate::nn::{act, join, sigmoid, Conv2d, Init, NamedParam, Params, Precision};
use crate::resample::bicubic;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RANetConfig {
    pub channels: usize,
    pub num_layers: usize,
    pub ca_reduction: usize,
    /// BSformer working size as (height, width).
    pub working_size: (usize, usize),
    /// Use separate parameter sets for the downscaling and restoring stages.
    pub separate_stages: bool,
    pub init_seed: u64,
}

impl Default for RANetConfig {
    fn default() -> Self {
        Self {
            channels: 32,
            num_layers: 3,
            ca_reduction: 4,
            working_size: (256, 256),
            separate_stages: false,
            init_seed: 0,
        }
    }
}

impl RANetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.channels == 0 || self.ca_reduction == 0 {
            return Err(config_err("RANet channels and reduction must be positive"));
        }
        if self.channels % self.ca_reduction != 0 {
            return Err(config_err(format!(
                "RANet channels {} not divisible by reduction {}",
                self.channels, self.ca_reduction
            )));
        }
        if self.working_size.0 == 0 || self.working_size.1 == 0 {
            return Err(config_err("working size must be positive"));
        }
        Ok(())
    }
}

/// Channel gate from pooled statistics through a shared bottleneck MLP.
#[derive(Clone)]
pub struct ChannelAttention {
    pub fc1: Conv2d,
    pub fc2: Conv2d,
}

impl ChannelAttention {
    pub fn new(init: &mut Init, channels: usize, reduction: usize) -> Result<Self> {
        let hidden = channels / reduction;
        Ok(Self {
            fc1: Conv2d::new(init, channels, hidden, 1, 1)?,
            fc2: Conv2d::new(init, hidden, channels, 1, 1)?,
        })
    }

    /// Average- and max-pooled channel descriptors, each (B, C, 1, 1).
    pub fn pooled(&self, f: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, c, h, w) = f.dims4()?;
        let flat = f.reshape((b, c, h * w))?;
        let avg = flat.mean_keepdim(D::Minus1)?.reshape((b, c, 1, 1))?;
        let max = flat.max_keepdim(D::Minus1)?.reshape((b, c, 1, 1))?;
        Ok((avg, max))
    }

    /// Per-channel scale in (0, 1), shape (B, C, 1, 1).
    pub fn scale(&self, f: &Tensor) -> Result<Tensor> {
        let (avg, max) = self.pooled(f)?;
        let mlp = |v: &Tensor| -> Result<Tensor> { self.fc2.forward(&act(&self.fc1.forward(v)?)?) };
        sigmoid(&(mlp(&avg)? + mlp(&max)?)?)
    }

    pub fn forward(&self, f: &Tensor) -> Result<Tensor> {
        let c = self.fc2.out_channels();
        if f.dims4()?.1 != c {
            return Err(ModelError::Shape {
                expected: vec![c],
                got: vec![f.dims4()?.1],
            });
        }
        Ok(f.broadcast_mul(&self.scale(f)?)?)
    }
}

impl Params for ChannelAttention {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }
}

#[derive(Clone)]
pub struct RANet {
    pub head: Conv2d,
    pub body: Vec<Conv2d>,
    pub ca: ChannelAttention,
    pub tail: Conv2d,
}

impl RANet {
    pub fn new(cfg: &RANetConfig, init: &mut Init) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.channels;
        Ok(Self {
            head: Conv2d::new(init, 1, c, 3, 1)?,
            body: (0..cfg.num_layers)
                .map(|_| Conv2d::new(init, c, c, 3, 1))
                .collect::<Result<_>>()?,
            ca: ChannelAttention::new(init, c, cfg.ca_reduction)?,
            tail: Conv2d::zeroed(init, c, 1, 3)?,
        })
    }

    pub fn init(cfg: &RANetConfig, precision: Precision) -> Result<Self> {
        Self::new(cfg, &mut Init::new(cfg.init_seed, precision))
    }

    /// Learned correction evaluated on an already resized image.
    pub fn correction(&self, up: &Tensor) -> Result<Tensor> {
        let mut f = act(&self.head.forward(up)?)?;
        for conv in &self.body {
            f = act(&conv.forward(&f)?)?;
        }
        let f = self.ca.forward(&f)?;
        self.tail.forward(&f)
    }

    /// Maps a (B, 1, H, W) batch to (B, 1, target_h, target_w).
    pub fn forward(&self, x: &Tensor, target: (usize, usize)) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 || h < 1 || w < 1 {
            return Err(ModelError::Shape {
                expected: vec![1],
                got: x.dims().to_vec(),
            });
        }
        let up = bicubic(x, target.0, target.1)?;
        Ok((&up + self.correction(&up)?)?)
    }
}

impl Params for RANet {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        self.head.visit(&join(prefix, "head"), out);
        for (i, conv) in self.body.iter().enumerate() {
            conv.visit(&join(prefix, &format!("body.{i}")), out);
        }
        self.ca.visit(&join(prefix, "ca"), out);
        self.tail.visit(&join(prefix, "tail"), out);
    }
}
