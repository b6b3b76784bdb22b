//! U-shaped window-attention restoration network.
//!
//! ```text
//! x ─ embed ─ FLN ─ proj ─┬ enc0 ─ down ┬ enc1 ─ down ─ bottleneck ┐
//!                         │             │                          │
//!                         │             └──── cat ─ dec1 ─ up ─────┘
//!                         └──── cat ─ dec0 ─ up ─┘
//!   FFN(dec0, dec1, bottleneck) ─ FLN ─ out ─ (+ x)
//! ```
//!
//! Convolutional parts run in NCHW, LeWin blocks in NHWC.

use candle_core::{DType, Device, IndexOp, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{config_err, ModelError, Result};
use crate::nn::{
    act, join, push, softmax_last, to_channels_first, to_channels_last, Conv2d, Init, LayerNorm,
    Linear, NamedParam, Params, Precision,
};
use crate::resample::bilinear;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BSformerConfig {
    pub embed_dim: usize,
    pub encoder_depths: Vec<usize>,
    pub bottleneck_depth: usize,
    /// Heads per level, finest first; one more entry than `encoder_depths`.
    pub heads: Vec<usize>,
    pub window_size: usize,
    pub mlp_ratio: usize,
    pub fln_subsets: usize,
    /// DCR blocks chained in each upper FLN sub-branch.
    pub fln_dcr_blocks: usize,
    /// Channels added by each dense convolution of a DCR block.
    pub dcr_growth: usize,
    pub init_seed: u64,
}

impl Default for BSformerConfig {
    fn default() -> Self {
        Self::toy()
    }
}

impl BSformerConfig {
    pub fn toy() -> Self {
        Self {
            embed_dim: 16,
            encoder_depths: vec![2, 2],
            bottleneck_depth: 2,
            heads: vec![1, 2, 4],
            window_size: 8,
            mlp_ratio: 4,
            fln_subsets: 4,
            fln_dcr_blocks: 2,
            dcr_growth: 8,
            init_seed: 0,
        }
    }

    pub fn paper() -> Self {
        Self {
            embed_dim: 32,
            encoder_depths: vec![2, 2, 2, 2],
            heads: vec![1, 2, 4, 8, 16],
            dcr_growth: 16,
            ..Self::toy()
        }
    }

    pub fn levels(&self) -> usize {
        self.encoder_depths.len()
    }

    pub fn level_channels(&self, level: usize) -> usize {
        self.embed_dim << level
    }

    /// Input height and width must be multiples of this.
    pub fn size_multiple(&self) -> usize {
        self.window_size << self.levels()
    }

    pub fn validate(&self) -> Result<()> {
        if self.embed_dim == 0 || self.window_size == 0 || self.mlp_ratio == 0 {
            return Err(config_err("embed_dim, window_size and mlp_ratio must be positive"));
        }
        if self.fln_subsets == 0 || self.embed_dim % self.fln_subsets != 0 {
            return Err(config_err(format!(
                "embed_dim {} not divisible by fln_subsets {}",
                self.embed_dim, self.fln_subsets
            )));
        }
        if self.dcr_growth == 0 {
            return Err(config_err("dcr_growth must be positive"));
        }
        if self.heads.len() != self.levels() + 1 {
            return Err(config_err(format!(
                "expected {} head counts, got {}",
                self.levels() + 1,
                self.heads.len()
            )));
        }
        for (level, &h) in self.heads.iter().enumerate() {
            let c = self.level_channels(level);
            if h == 0 || c % h != 0 {
                return Err(config_err(format!(
                    "{h} heads do not divide {c} channels at level {level}"
                )));
            }
        }
        Ok(())
    }

    pub fn check_input(&self, height: usize, width: usize) -> Result<()> {
        let m = self.size_multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(config_err(format!(
                "input {height}x{width} is not a multiple of {m}"
            )));
        }
        Ok(())
    }
}

/// How the residual branches start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum InitMode {
    /// Random branches; only the final output convolution is zero.
    #[default]
    Standard,
    /// Every residual output projection is zero as well.
    Identity,
}

// ---------------------------------------------------------------- FLN

/// Dense block: three 3x3 convolutions over the running concatenation, then
/// a 1x1 compression back to the input width.
#[derive(Clone)]
pub struct Dcr {
    pub dense: Vec<Conv2d>,
    pub compress: Conv2d,
}

pub const DCR_LAYERS: usize = 3;

impl Dcr {
    pub fn new(init: &mut Init, c: usize, growth: usize) -> Result<Self> {
        let dense = (0..DCR_LAYERS)
            .map(|i| Conv2d::new(init, c + i * growth, growth, 3, 1))
            .collect::<Result<_>>()?;
        Ok(Self {
            dense,
            compress: Conv2d::new(init, c + DCR_LAYERS * growth, c, 1, 1)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut feats = x.clone();
        for conv in &self.dense {
            let y = act(&conv.forward(&feats)?)?;
            feats = Tensor::cat(&[&feats, &y], 1)?;
        }
        self.compress.forward(&feats)
    }
}

impl Params for Dcr {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        for (i, c) in self.dense.iter().enumerate() {
            c.visit(&join(prefix, &format!("dense.{i}")), out);
        }
        self.compress.visit(&join(prefix, "compress"), out);
    }
}

/// Feature learning network.
///
/// Upper branch: `x + chain(x)` and `chain'(x)` built from DCR blocks.
/// Lower branch: channel subsets `x_1..x_s` with `y_1 = x_1`,
/// `y_i = conv_i(x_i + y_{i-1})`, then `x + fuse(cat(y))`.
/// Output: 1x1 fusion of the three branch outputs.
#[derive(Clone)]
pub struct Fln {
    pub residual: Vec<Dcr>,
    pub direct: Vec<Dcr>,
    pub subset_convs: Vec<Conv2d>,
    pub lower_fuse: Conv2d,
    pub fuse: Conv2d,
    subsets: usize,
}

impl Fln {
    pub fn new(init: &mut Init, c: usize, cfg: &BSformerConfig) -> Result<Self> {
        let s = cfg.fln_subsets;
        if s == 0 || c % s != 0 {
            return Err(config_err(format!("{c} channels not divisible into {s} subsets")));
        }
        let chain = |init: &mut Init| -> Result<Vec<Dcr>> {
            (0..cfg.fln_dcr_blocks)
                .map(|_| Dcr::new(init, c, cfg.dcr_growth))
                .collect()
        };
        Ok(Self {
            residual: chain(init)?,
            direct: chain(init)?,
            subset_convs: (1..s)
                .map(|_| Conv2d::new(init, c / s, c / s, 3, 1))
                .collect::<Result<_>>()?,
            lower_fuse: Conv2d::new(init, c, c, 1, 1)?,
            fuse: Conv2d::new(init, 3 * c, c, 1, 1)?,
            subsets: s,
        })
    }

    /// Concatenated subset cascade outputs `cat(y_1, ..., y_s)`.
    pub fn lower_cascade(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims4()?.1;
        let expected = self.lower_fuse.out_channels();
        if c != expected {
            return Err(ModelError::Shape {
                expected: vec![expected],
                got: vec![c],
            });
        }
        let parts = x.chunk(self.subsets, 1)?;
        let mut ys = vec![parts[0].clone()];
        for (i, conv) in self.subset_convs.iter().enumerate() {
            let prev = ys.last().unwrap();
            ys.push(conv.forward(&(&parts[i + 1] + prev)?)?);
        }
        Ok(Tensor::cat(&ys, 1)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut r = x.clone();
        for d in &self.residual {
            r = d.forward(&r)?;
        }
        let r = (x + r)?;
        let mut e = x.clone();
        for d in &self.direct {
            e = d.forward(&e)?;
        }
        let lower = (x + self.lower_fuse.forward(&self.lower_cascade(x)?)?)?;
        self.fuse.forward(&Tensor::cat(&[&r, &e, &lower], 1)?)
    }
}

impl Params for Fln {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        for (i, d) in self.residual.iter().enumerate() {
            d.visit(&join(prefix, &format!("residual.{i}")), out);
        }
        for (i, d) in self.direct.iter().enumerate() {
            d.visit(&join(prefix, &format!("direct.{i}")), out);
        }
        for (i, c) in self.subset_convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("subset.{i}")), out);
        }
        self.lower_fuse.visit(&join(prefix, "lower_fuse"), out);
        self.fuse.visit(&join(prefix, "fuse"), out);
    }
}

// ---------------------------------------------------------------- windows

/// (B, H, W, C) -> (B * H/ws * W/ws, ws*ws, C), windows in row-major order,
/// tokens row-major within each window.
pub fn window_partition(x: &Tensor, ws: usize) -> Result<Tensor> {
    let (b, h, w, c) = x.dims4()?;
    if ws == 0 || h % ws != 0 || w % ws != 0 {
        return Err(config_err(format!("{h}x{w} not divisible by window {ws}")));
    }
    Ok(x.reshape(&[b, h / ws, ws, w / ws, ws, c][..])?
        .permute([0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b * (h / ws) * (w / ws), ws * ws, c))?)
}

/// Inverse of [`window_partition`].
pub fn window_reverse(windows: &Tensor, ws: usize, b: usize, h: usize, w: usize) -> Result<Tensor> {
    let (n, t, c) = windows.dims3()?;
    if h % ws != 0 || w % ws != 0 || t != ws * ws || n != b * (h / ws) * (w / ws) {
        return Err(config_err(format!(
            "{n} windows of {t} tokens do not tile {b}x{h}x{w} with window {ws}"
        )));
    }
    Ok(windows
        .reshape(&[b, h / ws, w / ws, ws, ws, c][..])?
        .permute([0, 1, 3, 2, 4, 5])?
        .contiguous()?
        .reshape((b, h, w, c))?)
}

/// Index into the (2ws-1)^2 relative-offset table for every token pair.
pub fn relative_position_index(ws: usize) -> Vec<u32> {
    let n = ws * ws;
    let span = 2 * ws - 1;
    let mut idx = Vec::with_capacity(n * n);
    for i in 0..n {
        let (yi, xi) = (i / ws, i % ws);
        for j in 0..n {
            let (yj, xj) = (j / ws, j % ws);
            let dy = yi + ws - 1 - yj;
            let dx = xi + ws - 1 - xj;
            idx.push((dy * span + dx) as u32);
        }
    }
    idx
}

// ---------------------------------------------------------------- LeWin

#[derive(Clone)]
pub struct WindowAttention {
    pub qkv: Linear,
    pub proj: Linear,
    /// ((2ws-1)^2, heads)
    pub rel_bias: candle_core::Var,
    pub heads: usize,
    pub window: usize,
}

impl WindowAttention {
    pub fn new(init: &mut Init, dim: usize, heads: usize, window: usize) -> Result<Self> {
        let span = 2 * window - 1;
        Ok(Self {
            qkv: Linear::new(init, dim, 3 * dim)?,
            proj: Linear::new(init, dim, dim)?,
            rel_bias: init.trunc_normal(&[span * span, heads], 0.02)?,
            heads,
            window,
        })
    }

    fn bias(&self, dtype: DType) -> Result<Tensor> {
        let n = self.window * self.window;
        let idx = Tensor::from_vec(relative_position_index(self.window), n * n, &Device::Cpu)?;
        Ok(self
            .rel_bias
            .as_tensor()
            .index_select(&idx, 0)?
            .reshape((n, n, self.heads))?
            .permute((2, 0, 1))?
            .contiguous()?
            .to_dtype(dtype)?
            .unsqueeze(0)?)
    }

    fn split_heads(&self, tokens: &Tensor) -> Result<(Tensor, Tensor, Tensor)> {
        let (bw, n, c) = tokens.dims3()?;
        let d = c / self.heads;
        let qkv = self
            .qkv
            .forward(tokens)?
            .reshape(&[bw, n, 3, self.heads, d][..])?
            .permute([2, 0, 3, 1, 4])?
            .contiguous()?;
        Ok((qkv.i(0)?, qkv.i(1)?, qkv.i(2)?))
    }

    /// Attention probabilities (B_w, heads, N, N) for windowed tokens.
    pub fn probabilities(&self, tokens: &Tensor) -> Result<Tensor> {
        let (q, k, _) = self.split_heads(tokens)?;
        self.probs_from(&q, &k)
    }

    fn probs_from(&self, q: &Tensor, k: &Tensor) -> Result<Tensor> {
        let d = q.dims4()?.3;
        let scores = (q.matmul(&k.t()?)? * (1.0 / (d as f64).sqrt()))?;
        softmax_last(&scores.broadcast_add(&self.bias(q.dtype())?)?)
    }

    /// Multi-head attention inside each window of (B_w, N, C) tokens.
    pub fn forward_tokens(&self, tokens: &Tensor) -> Result<Tensor> {
        let (bw, n, c) = tokens.dims3()?;
        let (q, k, v) = self.split_heads(tokens)?;
        let attn = self.probs_from(&q, &k)?;
        let out = attn
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((bw, n, c))?;
        self.proj.forward(&out)
    }

    /// (B, H, W, C) -> (B, H, W, C).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, h, w, _) = x.dims4()?;
        let tokens = window_partition(x, self.window)?;
        window_reverse(&self.forward_tokens(&tokens)?, self.window, b, h, w)
    }
}

impl Params for WindowAttention {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        self.qkv.visit(&join(prefix, "qkv"), out);
        self.proj.visit(&join(prefix, "proj"), out);
        push(out, prefix, "rel_bias", &self.rel_bias, false);
    }
}

/// Locally enhanced feed-forward: expand, depthwise 3x3, project.
#[derive(Clone)]
pub struct LeFF {
    pub fc1: Linear,
    /// (hidden, 1, 3, 3)
    pub dw_weight: candle_core::Var,
    pub dw_bias: candle_core::Var,
    pub fc2: Linear,
}

impl LeFF {
    pub fn new(init: &mut Init, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(init, dim, hidden)?,
            dw_weight: init.trunc_normal(&[hidden, 1, 3, 3], (1.0f64 / 9.0).sqrt())?,
            dw_bias: init.zeros(&[hidden])?,
            fc2: Linear::new(init, hidden, dim)?,
        })
    }

    /// Depthwise 3x3 convolution with zero padding on (B, H, W, C).
    pub fn depthwise(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dims4()?.3;
        let taps = self.dw_weight.as_tensor().reshape((c, 9))?;
        let y = crate::kernels::depthwise3x3(x, &taps)?;
        Ok(y.broadcast_add(&self.dw_bias.as_tensor().reshape((1, 1, 1, c))?)?)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = act(&self.fc1.forward(x)?)?;
        let y = act(&self.depthwise(&y)?)?;
        self.fc2.forward(&y)
    }
}

impl Params for LeFF {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        self.fc1.visit(&join(prefix, "fc1"), out);
        push(out, prefix, "dw_weight", &self.dw_weight, true);
        push(out, prefix, "dw_bias", &self.dw_bias, false);
        self.fc2.visit(&join(prefix, "fc2"), out);
    }
}

/// Pre-norm block: `x + attn(ln(x))`, then `x + leff(ln(x))`.
#[derive(Clone)]
pub struct LeWinBlock {
    pub norm1: LayerNorm,
    pub attn: WindowAttention,
    pub norm2: LayerNorm,
    pub leff: LeFF,
}

impl LeWinBlock {
    pub fn new(init: &mut Init, dim: usize, heads: usize, cfg: &BSformerConfig) -> Result<Self> {
        if heads == 0 || dim % heads != 0 {
            return Err(config_err(format!("{heads} heads do not divide {dim} channels")));
        }
        Ok(Self {
            norm1: LayerNorm::new(init, dim)?,
            attn: WindowAttention::new(init, dim, heads, cfg.window_size)?,
            norm2: LayerNorm::new(init, dim)?,
            leff: LeFF::new(init, dim, dim * cfg.mlp_ratio)?,
        })
    }

    /// Zeroes both residual output projections.
    pub fn zero_residuals(&self) -> Result<()> {
        self.attn.proj.zero()?;
        self.leff.fc2.zero()
    }

    /// (B, H, W, C) -> (B, H, W, C).
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?)?)?;
        Ok((&x + self.leff.forward(&self.norm2.forward(&x)?)?)?)
    }
}

impl Params for LeWinBlock {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        self.norm1.visit(&join(prefix, "norm1"), out);
        self.attn.visit(&join(prefix, "attn"), out);
        self.norm2.visit(&join(prefix, "norm2"), out);
        self.leff.visit(&join(prefix, "leff"), out);
    }
}

#[derive(Clone)]
pub struct Stage {
    pub blocks: Vec<LeWinBlock>,
}

impl Stage {
    fn new(init: &mut Init, depth: usize, dim: usize, heads: usize, cfg: &BSformerConfig) -> Result<Self> {
        Ok(Self {
            blocks: (0..depth)
                .map(|_| LeWinBlock::new(init, dim, heads, cfg))
                .collect::<Result<_>>()?,
        })
    }

    /// NCHW in, NCHW out.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if self.blocks.is_empty() {
            return Ok(x.clone());
        }
        let mut t = to_channels_last(x)?;
        for b in &self.blocks {
            t = b.forward(&t)?;
        }
        to_channels_first(&t)
    }
}

impl Params for Stage {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.visit(&join(prefix, &format!("{i}")), out);
        }
    }
}

// ---------------------------------------------------------------- sampling

/// 2x2 stride-2 transposed convolution, as a matrix product followed by an
/// interleaving reshape.
#[derive(Clone)]
pub struct Upsample {
    /// (cin, cout * 4), column index `o * 4 + dy * 2 + dx`.
    pub weight: candle_core::Var,
    pub bias: candle_core::Var,
}

impl Upsample {
    pub fn new(init: &mut Init, cin: usize, cout: usize) -> Result<Self> {
        Ok(Self {
            weight: init.trunc_normal(&[cin, cout * 4], (1.0 / cin as f64).sqrt())?,
            bias: init.zeros(&[cout])?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, cin, h, w) = x.dims4()?;
        let cout = self.bias.dims()[0];
        let y = to_channels_last(x)?
            .reshape((b * h * w, cin))?
            .matmul(self.weight.as_tensor())?
            .reshape(&[b, h, w, cout, 2, 2][..])?
            .permute([0, 3, 1, 4, 2, 5])?
            .contiguous()?
            .reshape((b, cout, 2 * h, 2 * w))?;
        Ok(y.broadcast_add(&self.bias.as_tensor().reshape((1, cout, 1, 1))?)?)
    }
}

impl Params for Upsample {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        push(out, prefix, "weight", &self.weight, true);
        push(out, prefix, "bias", &self.bias, false);
    }
}

/// Cross-scale fusion: 1x1 compression of every map to a common width,
/// bilinear resize to the finest scale, concatenation and a 3x3 fuse.
#[derive(Clone)]
pub struct Ffn {
    pub compress: Vec<Conv2d>,
    pub fuse: Conv2d,
}

impl Ffn {
    /// `widths` lists the channel count of each input map, finest first.
    pub fn new(init: &mut Init, widths: &[usize], out: usize) -> Result<Self> {
        if widths.is_empty() {
            return Err(config_err("FFN needs at least one input scale"));
        }
        Ok(Self {
            compress: widths
                .iter()
                .map(|&c| Conv2d::new(init, c, out, 1, 1))
                .collect::<Result<_>>()?,
            fuse: Conv2d::new(init, out * widths.len(), out, 3, 1)?.replicate(),
        })
    }

    pub fn forward(&self, maps: &[Tensor]) -> Result<Tensor> {
        if maps.len() != self.compress.len() {
            return Err(config_err(format!(
                "FFN expects {} scales, got {}",
                self.compress.len(),
                maps.len()
            )));
        }
        let (_, _, h, w) = maps[0].dims4()?;
        let mut parts = Vec::with_capacity(maps.len());
        for (i, (m, conv)) in maps.iter().zip(&self.compress).enumerate() {
            let (_, _, mh, mw) = m.dims4()?;
            if mh << i != h || mw << i != w {
                return Err(config_err(format!(
                    "scale {i} is {mh}x{mw}, expected {}x{}",
                    h >> i,
                    w >> i
                )));
            }
            parts.push(bilinear(&conv.forward(m)?, h, w)?);
        }
        self.fuse.forward(&Tensor::cat(&parts, 1)?)
    }
}

impl Params for Ffn {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        for (i, c) in self.compress.iter().enumerate() {
            c.visit(&join(prefix, &format!("compress.{i}")), out);
        }
        self.fuse.visit(&join(prefix, "fuse"), out);
    }
}

// ---------------------------------------------------------------- network

#[derive(Clone)]
pub struct BSformer {
    pub cfg: BSformerConfig,
    pub embed: Conv2d,
    pub fln_head: Fln,
    pub proj_in: Conv2d,
    pub encoders: Vec<Stage>,
    pub downs: Vec<Conv2d>,
    pub bottleneck: Stage,
    pub ups: Vec<Upsample>,
    pub reduces: Vec<Conv2d>,
    pub decoders: Vec<Stage>,
    pub ffn: Ffn,
    pub fln_tail: Fln,
    pub out: Conv2d,
}

impl BSformer {
    pub fn new(cfg: &BSformerConfig, init: &mut Init, mode: InitMode) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.embed_dim;
        let levels = cfg.levels();
        let embed = Conv2d::new(init, 1, c, 3, 1)?;
        let fln_head = Fln::new(init, c, cfg)?;
        let proj_in = Conv2d::new(init, c, c, 1, 1)?;
        let mut encoders = Vec::new();
        let mut downs = Vec::new();
        for level in 0..levels {
            let ch = cfg.level_channels(level);
            encoders.push(Stage::new(init, cfg.encoder_depths[level], ch, cfg.heads[level], cfg)?);
            downs.push(Conv2d::new(init, ch, 2 * ch, 3, 2)?);
        }
        let bottleneck = Stage::new(
            init,
            cfg.bottleneck_depth,
            cfg.level_channels(levels),
            cfg.heads[levels],
            cfg,
        )?;
        let mut ups = Vec::new();
        let mut reduces = Vec::new();
        let mut decoders = Vec::new();
        for level in 0..levels {
            let ch = cfg.level_channels(level);
            ups.push(Upsample::new(init, 2 * ch, ch)?);
            reduces.push(Conv2d::new(init, 2 * ch, ch, 1, 1)?);
            decoders.push(Stage::new(init, cfg.encoder_depths[level], ch, cfg.heads[level], cfg)?);
        }
        let widths: Vec<usize> = (0..=levels).map(|l| cfg.level_channels(l)).collect();
        let ffn = Ffn::new(init, &widths, c)?;
        let fln_tail = Fln::new(init, c, cfg)?;
        let out = Conv2d::zeroed(init, c, 1, 3)?;
        let net = Self {
            cfg: cfg.clone(),
            embed,
            fln_head,
            proj_in,
            encoders,
            downs,
            bottleneck,
            ups,
            reduces,
            decoders,
            ffn,
            fln_tail,
            out,
        };
        if mode == InitMode::Identity {
            for block in net.blocks() {
                block.zero_residuals()?;
            }
        }
        Ok(net)
    }

    pub fn init(cfg: &BSformerConfig, precision: Precision, mode: InitMode) -> Result<Self> {
        Self::new(cfg, &mut Init::new(cfg.init_seed, precision), mode)
    }

    /// Every LeWin block, encoder to decoder order.
    pub fn blocks(&self) -> impl Iterator<Item = &LeWinBlock> {
        self.encoders
            .iter()
            .chain(std::iter::once(&self.bottleneck))
            .chain(self.decoders.iter())
            .flat_map(|s| s.blocks.iter())
    }

    /// Maps a normalized (B, 1, H, W) batch to the same shape.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = x.dims4()?;
        if c != 1 {
            return Err(ModelError::Shape {
                expected: vec![1],
                got: x.dims().to_vec(),
            });
        }
        self.cfg.check_input(h, w)?;
        let mut f = self.proj_in.forward(&self.fln_head.forward(&self.embed.forward(x)?)?)?;
        let mut skips = Vec::new();
        for (enc, down) in self.encoders.iter().zip(&self.downs) {
            let e = enc.forward(&f)?;
            f = down.forward(&e)?;
            skips.push(e);
        }
        let deep = self.bottleneck.forward(&f)?;
        let mut scales = vec![deep.clone()];
        let mut d = deep;
        for level in (0..self.cfg.levels()).rev() {
            let up = self.ups[level].forward(&d)?;
            let merged = self.reduces[level].forward(&Tensor::cat(&[&up, &skips[level]], 1)?)?;
            d = self.decoders[level].forward(&merged)?;
            scales.push(d.clone());
        }
        scales.reverse();
        let fused = self.ffn.forward(&scales)?;
        let y = self.out.forward(&self.fln_tail.forward(&fused)?)?;
        Ok((x + y)?)
    }
}

impl Params for BSformer {
    fn visit(&self, prefix: &str, out: &mut Vec<NamedParam>) {
        self.embed.visit(&join(prefix, "embed"), out);
        self.fln_head.visit(&join(prefix, "fln_head"), out);
        self.proj_in.visit(&join(prefix, "proj_in"), out);
        for (i, (e, d)) in self.encoders.iter().zip(&self.downs).enumerate() {
            e.visit(&join(prefix, &format!("encoder.{i}")), out);
            d.visit(&join(prefix, &format!("down.{i}")), out);
        }
        self.bottleneck.visit(&join(prefix, "bottleneck"), out);
        for i in (0..self.cfg.levels()).rev() {
            self.ups[i].visit(&join(prefix, &format!("up.{i}")), out);
            self.reduces[i].visit(&join(prefix, &format!("reduce.{i}")), out);
            self.decoders[i].visit(&join(prefix, &format!("decoder.{i}")), out);
        }
        self.ffn.visit(&join(prefix, "ffn"), out);
        self.fln_tail.visit(&join(prefix, "fln_tail"), out);
        self.out.visit(&join(prefix, "out"), out);
    }
}
