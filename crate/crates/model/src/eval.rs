//! Per-method evaluation over a test set.

use std::fmt;
use std::str::FromStr;

use bsonet_core::baselines::{bilateral_filter, gaussian_filter, nlm_denoise, BaselineConfig};
use bsonet_core::metrics::{cpbd, local_contrast, psnr_mse, ImageMetrics, MetricsReport};
use bsonet_core::Image;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, ModelError, Result};
use crate::pipeline::{full_pipeline_infer, BSoNet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Identity,
    Gaussian,
    Bilateral,
    Nlm,
    Bsonet,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Identity,
        Method::Gaussian,
        Method::Bilateral,
        Method::Nlm,
        Method::Bsonet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Identity => "identity",
            Method::Gaussian => "gaussian",
            Method::Bilateral => "bilateral",
            Method::Nlm => "nlm",
            Method::Bsonet => "bsonet",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.to_ascii_lowercase())
            .ok_or_else(|| ModelError::UnknownMethod(s.to_string()))
    }
}

/// One test image with its optional clean reference.
#[derive(Debug, Clone)]
pub struct EvalSample {
    pub id: String,
    pub input: Image,
    pub clean: Option<Image>,
}

/// Applies one method to an image.
pub fn apply_method(
    method: Method,
    img: &Image,
    model: Option<&BSoNet>,
    baselines: &BaselineConfig,
) -> Result<Image> {
    Ok(match method {
        Method::Identity => img.clone(),
        Method::Gaussian => gaussian_filter(img, &baselines.gaussian),
        Method::Bilateral => bilateral_filter(img, &baselines.bilateral),
        Method::Nlm => nlm_denoise(img, &baselines.nlm)?,
        Method::Bsonet => {
            let model = model.ok_or_else(|| config_err("bsonet evaluation needs a model"))?;
            full_pipeline_infer(img, model)?
        }
    })
}

pub fn image_metrics(id: &str, output: &Image, clean: Option<&Image>) -> Result<ImageMetrics> {
    let sharpness = cpbd(output)?;
    let reference = clean.map(|c| psnr_mse(output, c)).transpose()?;
    Ok(ImageMetrics {
        image_id: id.to_string(),
        local_contrast: local_contrast(output)?,
        cpbd: sharpness.score,
        no_edges: sharpness.no_edges,
        mse: reference.map(|r| r.1),
        psnr: reference.map(|r| r.0),
    })
}

pub fn evaluate(
    method: Method,
    samples: &[EvalSample],
    model: Option<&BSoNet>,
    baselines: &BaselineConfig,
) -> Result<MetricsReport> {
    if samples.is_empty() {
        return Err(config_err("test set is empty"));
    }
    baselines.validate()?;
    let rows = samples
        .iter()
        .map(|s| {
            let out = apply_method(method, &s.input, model, baselines)?;
            image_metrics(&s.id, &out, s.clean.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MetricsReport::new(method.name(), rows))
}
