//! The composed model: RANet to the working size, BSformer, RANet back.

use bsonet_core::image::{clamp_raw, denormalize, normalize};
use bsonet_core::Image;
use candle_core::{Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::bsformer::{BSformer, BSformerConfig, InitMode};
use crate::error::{ModelError, Result};
use crate::nn::{join, Init, NamedParam, Params, Precision};
use crate::ranet::{RANet, RANetConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct ModelConfig {
    pub ranet: RANetConfig,
    pub bsformer: BSformerConfig,
}

impl ModelConfig {
    /// Small preset that trains on a CPU: 64x64 working size.
    pub fn toy() -> Self {
        Self {
            ranet: RANetConfig {
                channels: 16,
                num_layers: 3,
                working_size: (64, 64),
                ..RANetConfig::default()
            },
            bsformer: BSformerConfig::toy(),
        }
    }

    /// Full-width preset at a 256x256 working size.
    pub fn paper() -> Self {
        Self {
            ranet: RANetConfig::default(),
            bsformer: BSformerConfig::paper(),
        }
    }

    pub fn working_size(&self) -> (usize, usize) {
        self.ranet.working_size
    }

    pub fn validate(&self) -> Result<()> {
        self.ranet.validate()?;
        self.bsformer.validate()?;
        let (h, w) = self.working_size();
        self.bsformer.check_input(h, w)
    }
}

/// Seed offset of the restoring RANet when the two stages are separate.
pub const SECOND_STAGE_SEED_OFFSET: u64 = 1;

#[derive(Clone)]
pub struct BSoNet {
    pub cfg: ModelConfig,
    pub precision: Precision,
    pub ranet_in: RANet,
    /// Present only when the stages do not share parameters.
    pub ranet_out: Option<RANet>,
    pub bsformer: BSformer,
}

impl BSoNet {
    pub fn init(cfg: &ModelConfig, precision: Precision, mode: InitMode) -> Result<Self> {
        cfg.validate()?;
        let ranet_in = RANet::init(&cfg.ranet, precision)?;
        let ranet_out = if cfg.ranet.separate_stages {
            let mut init = Init::new(
                cfg.ranet.init_seed.wrapping_add(SECOND_STAGE_SEED_OFFSET),
                precision,
            );
            Some(RANet::new(&cfg.ranet, &mut init)?)
        } else {
            None
        };
        Ok(Self {
            cfg: cfg.clone(),
            precision,
            ranet_in,
            ranet_out,
            bsformer: BSformer::init(&cfg.bsformer, precision, mode)?,
        })
    }

    pub fn restoring_ranet(&self) -> &RANet {
        self.ranet_out.as_ref().unwrap_or(&self.ranet_in)
    }

    /// Normalized (B, 1, H, W) in, same shape out, for any H, W >= 3.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        if h < 3 || w < 3 {
            return Err(ModelError::Shape {
                expected: vec![3, 3],
                got: vec![h, w],
            });
        }
        let working = self.ranet_in.forward(x, self.cfg.working_size())?;
        let restored = self.bsformer.forward(&working)?;
        self.restoring_ranet().forward(&restored, (h, w))
    }

    pub fn image_to_tensor(&self, img: &Image) -> Result<Tensor> {
        let (h, w) = img.dims();
        let values: Vec<f64> = img.pixels().iter().map(|&v| normalize(v)).collect();
        Ok(Tensor::from_vec(values, (1, 1, h, w), &Device::Cpu)?.to_dtype(self.precision.dtype())?)
    }

    pub fn tensor_to_image(t: &Tensor) -> Result<Image> {
        let (_, _, h, w) = t.dims4()?;
        let values = t
            .flatten_all()?
            .to_dtype(candle_core::DType::F64)?
            .to_vec1::<f64>()?
            .into_iter()
            .map(|v| clamp_raw(denormalize(v)))
            .collect();
        Ok(Image::from_vec(w, h, values)?)
    }
}

impl Params for BSoNet {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        self.ranet_in.visit(&join(prefix, "ranet_in"), out);
        if let Some(r) = &self.ranet_out {
            r.visit(&join(prefix, "ranet_out"), out);
        }
        self.bsformer.visit(&join(prefix, "bsformer"), out);
    }
}

/// Restores an image of any size >= 3x3; output is clamped to the raw range.
pub fn full_pipeline_infer(img: &Image, model: &BSoNet) -> Result<Image> {
    let x = model.image_to_tensor(img)?;
    let y = model.forward(&x)?.detach();
    BSoNet::tensor_to_image(&y)
}
