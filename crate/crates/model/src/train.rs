//! Blind-spot training loop.
//!
//! Every epoch draws one random crop per raw image, builds a fresh masked
//! pair from it, and takes AdamW steps on the Charbonnier loss over
//! shuffled mini-batches. Seeds:
//!
//! * epoch seed `e_s = seed ^ (epoch * 0x9E3779B97F4A7C15)`;
//! * per-image seed `pair_seed(e_s, index)` drives both the crop position and
//!   the masked pair;
//! * the batch order is a shuffle seeded with `e_s`.

use bsonet_core::image::normalize;
use bsonet_core::metrics::{LossConfig, Reduction};
use bsonet_core::n2v::{build_pair, pair_seed, N2VConfig};
use bsonet_core::Image;
use candle_core::{Device, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bsformer::InitMode;
use crate::checkpoint::Checkpoint;
use crate::error::{config_err, ModelError, Result};
use crate::nn::{restore, snapshot, NamedParam, Params, Precision};
use crate::optim::{cosine_lr, AdamW, AdamWConfig};
use crate::pipeline::{BSoNet, ModelConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_initial: f64,
    pub lr_min: f64,
    pub optimizer: AdamWConfig,
    pub batch_size: usize,
    pub seed: u64,
    /// Side of square random crops fed straight to BSformer, which is then
    /// the only trained network. `None` trains the whole pipeline on full
    /// images, which must then share one size.
    pub crop_size: Option<usize>,
    /// Fraction of a corpus used for training by the command-line tools.
    pub split_ratio: f64,
    /// Anneal per optimizer step instead of per epoch.
    pub per_step_schedule: bool,
    pub loss: LossConfig,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 250,
            lr_initial: 1e-4,
            lr_min: 1e-6,
            optimizer: AdamWConfig::default(),
            batch_size: 4,
            seed: 0,
            crop_size: None,
            split_ratio: 760.0 / 906.0,
            per_step_schedule: false,
            loss: LossConfig::default(),
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    /// CPU recipe for [`ModelConfig::toy`]: 32x32 crops straight into
    /// BSformer at a higher learning rate.
    pub fn toy() -> Self {
        Self {
            epochs: 150,
            lr_initial: 2e-3,
            crop_size: Some(32),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(config_err("epochs must be at least 1"));
        }
        if !(self.lr_min < self.lr_initial) || self.lr_min < 0.0 {
            return Err(config_err("need 0 <= lr_min < lr_initial"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch size must be positive"));
        }
        if !(self.split_ratio > 0.0 && self.split_ratio <= 1.0) {
            return Err(config_err("split ratio must be in (0, 1]"));
        }
        if !(self.loss.epsilon > 0.0) {
            return Err(config_err("loss epsilon must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
}

/// 1-based epoch of the first minimum, ignoring non-finite values.
pub fn select_best(losses: &[f64]) -> Option<usize> {
    losses
        .iter()
        .enumerate()
        .filter(|(_, l)| l.is_finite())
        .fold(None, |best: Option<(usize, f64)>, (i, &l)| match best {
            Some((_, b)) if b <= l => best,
            _ => Some((i, l)),
        })
        .map(|(i, _)| i + 1)
}

pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Reflect index (no edge repeat) into `0..len`.
fn reflect(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let m = i.rem_euclid(period);
    (if m < len as isize { m } else { period - m }) as usize
}

/// Square crop at a random position; images smaller than the crop are
/// reflect-padded first.
pub fn random_crop<R: Rng + ?Sized>(img: &Image, size: usize, rng: &mut R) -> Result<Image> {
    let (h, w) = img.dims();
    let r0 = if h > size { rng.random_range(0..=h - size) } else { 0 };
    let c0 = if w > size { rng.random_range(0..=w - size) } else { 0 };
    Ok(Image::from_fn(size, size, |r, c| {
        img.get(
            reflect((r0 + r) as isize, h),
            reflect((c0 + c) as isize, w),
        )
    })?)
}

/// Reduction actually used, given the blind-spot configuration.
pub fn effective_reduction(n2v: &N2VConfig, loss: &LossConfig) -> Reduction {
    match (n2v.masked_loss_only, loss.reduction) {
        (true, _) => Reduction::MaskedMean,
        (false, Reduction::MaskedMean) => Reduction::FullMean,
        (false, r) => r,
    }
}

/// Charbonnier loss on tensors, matching `bsonet_core::metrics::charbonnier_loss`.
pub fn charbonnier_tensor(
    pred: &Tensor,
    target: &Tensor,
    mask: Option<&Tensor>,
    eps: f64,
    reduction: Reduction,
) -> Result<Tensor> {
    let d2 = (pred - target)?.sqr()?;
    match reduction {
        Reduction::GlobalNorm => {
            let ss = d2.sum_all()?;
            let rho = (&ss + eps * eps)?.sqrt()?;
            Ok(((ss / (rho + eps)?)? + eps)?)
        }
        Reduction::FullMean | Reduction::MaskedMean => {
            let excess = (&d2 / ((&d2 + eps * eps)?.sqrt()? + eps)?)?;
            match (reduction, mask) {
                (Reduction::MaskedMean, Some(m)) => {
                    let count = m.sum_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
                    if count == 0.0 {
                        return Err(ModelError::Image(bsonet_core::Error::EmptyMask));
                    }
                    Ok(((excess * m)?.sum_all()? / count)?.affine(1.0, eps)?)
                }
                (Reduction::MaskedMean, None) => {
                    Err(config_err("masked loss requested without a mask"))
                }
                _ => Ok(excess.mean_all()?.affine(1.0, eps)?),
            }
        }
    }
}

struct Batch {
    input: Tensor,
    target: Tensor,
    mask: Tensor,
}

fn stack(images: &[Image], precision: Precision, f: impl Fn(f64) -> f64) -> Result<Tensor> {
    let (h, w) = images[0].dims();
    let values: Vec<f64> = images
        .iter()
        .flat_map(|img| img.pixels().iter().map(|&v| f(v)))
        .collect();
    Ok(Tensor::from_vec(values, (images.len(), 1, h, w), &Device::Cpu)?
        .to_dtype(precision.dtype())?)
}

/// The crops and pairs of one epoch, batched in shuffled order.
fn epoch_batches(
    dataset: &[Image],
    n2v: &N2VConfig,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<Vec<Batch>> {
    let es = epoch_seed(cfg.seed, epoch);
    let mut pairs = Vec::with_capacity(dataset.len());
    for (i, raw) in dataset.iter().enumerate() {
        let ps = pair_seed(es, i as u64);
        let mut rng = ChaCha8Rng::seed_from_u64(ps);
        let sample = match cfg.crop_size {
            Some(s) => random_crop(raw, s, &mut rng)?,
            None => raw.clone(),
        };
        pairs.push(build_pair(&sample, &n2v.with_seed(ps))?);
    }
    let mut order: Vec<usize> = (0..pairs.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(es));
    order
        .chunks(cfg.batch_size)
        .map(|idx| {
            let inputs: Vec<Image> = idx.iter().map(|&i| pairs[i].input.clone()).collect();
            let targets: Vec<Image> = idx.iter().map(|&i| pairs[i].target.clone()).collect();
            let masks: Vec<Image> = idx.iter().map(|&i| pairs[i].mask.to_image()).collect();
            Ok(Batch {
                input: stack(&inputs, cfg.precision, normalize)?,
                target: stack(&targets, cfg.precision, normalize)?,
                mask: stack(&masks, cfg.precision, |v| v)?,
            })
        })
        .collect()
}

/// Trains a freshly initialized model.
pub fn train(
    dataset: &[Image],
    n2v: &N2VConfig,
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let model = BSoNet::init(model_cfg, cfg.precision, InitMode::Standard)?;
    train_model(&model, dataset, n2v, cfg)
}

/// Trains `model` in place and returns the best-epoch checkpoint.
pub fn train_model(
    model: &BSoNet,
    dataset: &[Image],
    n2v: &N2VConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    n2v.validate()?;
    if dataset.is_empty() {
        return Err(config_err("training set is empty"));
    }
    if model.precision != cfg.precision {
        return Err(config_err("model precision differs from training precision"));
    }
    let direct = cfg.crop_size.is_some();
    match cfg.crop_size {
        Some(s) => model.cfg.bsformer.check_input(s, s)?,
        None => {
            let dims = dataset[0].dims();
            if dataset.iter().any(|img| img.dims() != dims) {
                return Err(config_err("full-image training needs equally sized images"));
            }
        }
    }
    let trainable: Vec<NamedParam> = if direct {
        model.bsformer.named_params()
    } else {
        model.named_params()
    };
    let mut opt = AdamW::new(trainable, cfg.optimizer)?;
    let reduction = effective_reduction(n2v, &cfg.loss);
    let forward = |x: &Tensor| -> Result<Tensor> {
        if direct {
            model.bsformer.forward(x)
        } else {
            model.forward(x)
        }
    };

    let batches_per_epoch = dataset.len().div_ceil(cfg.batch_size);
    let total_steps = cfg.epochs * batches_per_epoch;
    let all_params = model.named_params();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;

    for epoch in 0..cfg.epochs {
        let batches = epoch_batches(dataset, n2v, cfg, epoch)?;
        let epoch_lr = cosine_lr(epoch, cfg.epochs, cfg.lr_initial, cfg.lr_min)?;
        let mut sum = 0.0;
        for (bi, batch) in batches.iter().enumerate() {
            let lr = if cfg.per_step_schedule {
                cosine_lr(epoch * batches_per_epoch + bi, total_steps, cfg.lr_initial, cfg.lr_min)?
            } else {
                epoch_lr
            };
            let pred = forward(&batch.input)?;
            let loss = charbonnier_tensor(
                &pred,
                &batch.target,
                Some(&batch.mask),
                cfg.loss.epsilon,
                reduction,
            )?;
            let value = loss.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                let last_good = match &best {
                    Some((e, l, values)) => {
                        restore(&all_params, values)?;
                        Some(Box::new(Checkpoint::from_model(model, *e, Some(*l))?))
                    }
                    None => None,
                };
                return Err(ModelError::Diverged {
                    epoch: epoch + 1,
                    loss: value,
                    last_good,
                });
            }
            let grads = loss.backward()?;
            opt.step(&grads, lr)?;
            sum += value;
        }
        let mean = sum / batches.len() as f64;
        log::info!("epoch {:>4}  loss {:.6e}  lr {:.3e}", epoch + 1, mean, epoch_lr);
        history.push(EpochRecord {
            epoch: epoch + 1,
            loss: mean,
            lr: epoch_lr,
        });
        if best.as_ref().is_none_or(|(_, l, _)| mean < *l) {
            best = Some((epoch + 1, mean, snapshot(&all_params)?));
        }
    }

    let (best_epoch, best_loss, values) = best.expect("at least one epoch");
    restore(&all_params, &values)?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint::from_model(model, best_epoch, Some(best_loss))?,
        history,
        best_epoch,
    })
}
