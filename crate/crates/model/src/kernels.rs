//! Fused CPU kernels with hand-written backward passes: GELU, the 3x3
//! depthwise convolution and dense 2-D convolution (im2col + GEMM).

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, DType, Layout, Shape, Tensor};

trait Real:
    Copy
    + Default
    + std::ops::Add<Output = Self>
    + std::ops::Mul<Output = Self>
    + std::ops::AddAssign
    + Send
    + Sync
    + 'static
{
    fn c(v: f64) -> Self;
    fn tanh(self) -> Self;
}

impl Real for f32 {
    fn c(v: f64) -> Self {
        v as f32
    }
    fn tanh(self) -> Self {
        f32::tanh(self)
    }
}

impl Real for f64 {
    fn c(v: f64) -> Self {
        v
    }
    fn tanh(self) -> Self {
        f64::tanh(self)
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

#[inline]
fn gelu_value<T: Real>(x: T) -> T {
    let u = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_CUBIC) * x * x * x);
    T::c(0.5) * x * (T::c(1.0) + u.tanh())
}

#[inline]
fn gelu_slope<T: Real>(x: T) -> T {
    let u = T::c(SQRT_2_OVER_PI) * (x + T::c(GELU_CUBIC) * x * x * x);
    let t = u.tanh();
    let du = T::c(SQRT_2_OVER_PI) * (T::c(1.0) + T::c(3.0 * GELU_CUBIC) * x * x);
    T::c(0.5) * (T::c(1.0) + t) + T::c(0.5) * x * (T::c(1.0) + T::c(-1.0) * t * t) * du
}

fn contiguous<'a, T>(v: &'a [T], layout: &Layout, what: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&v[a..b]),
        None => candle_core::bail!("{what}: input must be contiguous"),
    }
}

struct Gelu;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match s {
            CpuStorage::F32(v) => {
                CpuStorage::F32(contiguous(v, l, "gelu")?.iter().map(|&x| gelu_value(x)).collect())
            }
            CpuStorage::F64(v) => {
                CpuStorage::F64(contiguous(v, l, "gelu")?.iter().map(|&x| gelu_value(x)).collect())
            }
            _ => candle_core::bail!("gelu: f32/f64 only"),
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(arg.apply_op2_no_bwd(&grad.contiguous()?, &GeluGrad)?))
    }
}

struct GeluGrad;

impl CustomOp2 for GeluGrad {
    fn name(&self) -> &'static str {
        "fused-gelu-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Real>(x: &[T], g: &[T]) -> Vec<T> {
            x.iter().zip(g).map(|(&x, &g)| g * gelu_slope(x)).collect()
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(g)) => {
                CpuStorage::F32(run(contiguous(x, l1, "gelu")?, contiguous(g, l2, "gelu")?))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g)) => {
                CpuStorage::F64(run(contiguous(x, l1, "gelu")?, contiguous(g, l2, "gelu")?))
            }
            _ => candle_core::bail!("gelu grad: matching f32/f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }
}

/// GELU (tanh form) with a single-pass backward.
pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.contiguous()?.apply_op1(Gelu)
}

/// Depthwise 3x3 convolution, zero padding, on NHWC input with weights (C, 9)
/// in row-major tap order.
struct Depthwise;

/// (C, 9) to tap-major (9, C), so channel loops read contiguous weights.
fn taps_major<T: Real>(w: &[T], c: usize) -> Vec<T> {
    (0..9 * c).map(|i| w[(i % c) * 9 + i / c]).collect()
}

fn dw_forward<T: Real>(x: &[T], w: &[T], dims: (usize, usize, usize, usize)) -> Vec<T> {
    let (b, h, wd, c) = dims;
    let w = taps_major(w, c);
    let mut out = vec![T::default(); x.len()];
    for n in 0..b {
        for y in 0..h {
            for k in 0..9 {
                let sy = y as isize + (k / 3) as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..wd {
                    let sx = xx as isize + (k % 3) as isize - 1;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let src = ((n * h + sy as usize) * wd + sx as usize) * c;
                    let dst = ((n * h + y) * wd + xx) * c;
                    let (o, xs, ws) = (&mut out[dst..dst + c], &x[src..src + c], &w[k * c..][..c]);
                    for ch in 0..c {
                        o[ch] += ws[ch] * xs[ch];
                    }
                }
            }
        }
    }
    out
}

/// Gradients for input and weights given the output gradient.
fn dw_backward<T: Real>(
    x: &[T],
    w: &[T],
    g: &[T],
    dims: (usize, usize, usize, usize),
) -> (Vec<T>, Vec<T>) {
    let (b, h, wd, c) = dims;
    let w = taps_major(w, c);
    let mut gx = vec![T::default(); x.len()];
    let mut gw = vec![T::default(); w.len()];
    for n in 0..b {
        for y in 0..h {
            for k in 0..9 {
                let sy = y as isize + (k / 3) as isize - 1;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for xx in 0..wd {
                    let sx = xx as isize + (k % 3) as isize - 1;
                    if sx < 0 || sx >= wd as isize {
                        continue;
                    }
                    let src = ((n * h + sy as usize) * wd + sx as usize) * c;
                    let dst = ((n * h + y) * wd + xx) * c;
                    let (gs, xs, ws) = (&g[dst..dst + c], &x[src..src + c], &w[k * c..][..c]);
                    let gxs = &mut gx[src..src + c];
                    for ch in 0..c {
                        gxs[ch] += ws[ch] * gs[ch];
                    }
                    let gws = &mut gw[k * c..][..c];
                    for ch in 0..c {
                        gws[ch] += gs[ch] * xs[ch];
                    }
                }
            }
        }
    }
    let gw = (0..9 * c).map(|i| gw[(i % 9) * c + i / 9]).collect();
    (gx, gw)
}

impl CustomOp2 for Depthwise {
    fn name(&self) -> &'static str {
        "depthwise3x3"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.shape().dims4()?;
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(w)) => CpuStorage::F32(dw_forward(
                contiguous(x, l1, "depthwise")?,
                contiguous(w, l2, "depthwise")?,
                dims,
            )),
            (CpuStorage::F64(x), CpuStorage::F64(w)) => CpuStorage::F64(dw_forward(
                contiguous(x, l1, "depthwise")?,
                contiguous(w, l2, "depthwise")?,
                dims,
            )),
            _ => candle_core::bail!("depthwise: matching f32/f64 only"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let dims = x.dims4()?;
        let grad = grad.contiguous()?;
        let (gx, gw) = match x.dtype() {
            candle_core::DType::F32 => {
                let (a, b) = dw_backward(
                    &x.flatten_all()?.to_vec1::<f32>()?,
                    &w.flatten_all()?.to_vec1::<f32>()?,
                    &grad.flatten_all()?.to_vec1::<f32>()?,
                    dims,
                );
                (Tensor::new(a, x.device())?, Tensor::new(b, x.device())?)
            }
            candle_core::DType::F64 => {
                let (a, b) = dw_backward(
                    &x.flatten_all()?.to_vec1::<f64>()?,
                    &w.flatten_all()?.to_vec1::<f64>()?,
                    &grad.flatten_all()?.to_vec1::<f64>()?,
                    dims,
                );
                (Tensor::new(a, x.device())?, Tensor::new(b, x.device())?)
            }
            dt => candle_core::bail!("depthwise: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx.reshape(x.shape())?), Some(gw.reshape(w.shape())?)))
    }
}

/// `x`: (B, H, W, C); `w`: (C, 9).
pub fn depthwise3x3(x: &Tensor, w: &Tensor) -> candle_core::Result<Tensor> {
    let c = x.dims4()?.3;
    if w.dims() != [c, 9] {
        candle_core::bail!("depthwise weights {:?} do not match {c} channels", w.dims());
    }
    x.contiguous()?.apply_op2(&w.contiguous()?, Depthwise)
}

/// Geometry of a dense convolution with symmetric zero padding.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn new(x: &Shape, w: &Shape, stride: usize, pad: usize) -> candle_core::Result<Self> {
        let (b, c, h, wd) = x.dims4()?;
        let (o, wc, k, k2) = w.dims4()?;
        if wc != c || k != k2 || stride == 0 || h + 2 * pad < k || wd + 2 * pad < k {
            candle_core::bail!("conv2d: input {x:?} incompatible with kernel {w:?}");
        }
        Ok(Self {
            b,
            c,
            h,
            w: wd,
            o,
            k,
            stride,
            pad,
            oh: (h + 2 * pad - k) / stride + 1,
            ow: (wd + 2 * pad - k) / stride + 1,
        })
    }

    fn plane(&self) -> usize {
        self.oh * self.ow
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source pixel of output `(oy, ox)` at tap `(ky, kx)`, if inside the image.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let sy = (oy * self.stride + ky) as isize - self.pad as isize;
        let sx = (ox * self.stride + kx) as isize - self.pad as isize;
        (sy >= 0 && sx >= 0 && (sy as usize) < self.h && (sx as usize) < self.w)
            .then(|| sy as usize * self.w + sx as usize)
    }

    /// Column matrix (C*k*k, oh*ow) of one image.
    fn im2col<T: Real>(&self, x: &[T], cols: &mut [T]) {
        let p = self.plane();
        for c in 0..self.c {
            let src = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &mut cols[((c * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            row[oy * self.ow + ox] =
                                self.source(oy, ox, ky, kx).map_or(T::default(), |i| src[i]);
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a column matrix back onto one image.
    fn col2im<T: Real>(&self, cols: &[T], x: &mut [T]) {
        let p = self.plane();
        for c in 0..self.c {
            let dst = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = &cols[((c * self.k + ky) * self.k + kx) * p..][..p];
                    for oy in 0..self.oh {
                        for ox in 0..self.ow {
                            if let Some(i) = self.source(oy, ox, ky, kx) {
                                dst[i] += row[oy * self.ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Row-major `dst (m, n) (+)= a (m, k) * b (k, n)` with explicit strides for
/// `a` and `b` given as (row stride, column stride).
#[allow(clippy::too_many_arguments)]
fn matmul<T: Real>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    a: &[T],
    a_strides: (usize, usize),
    b: &[T],
    b_strides: (usize, usize),
) {
    debug_assert!(dst.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            dst[..m * n].fill(T::default());
        }
        return;
    }
    // SAFETY: every index the kernel touches lies inside the slices, which
    // the strides and sizes above describe.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_strides.1 as isize,
            a_strides.0 as isize,
            b.as_ptr(),
            b_strides.1 as isize,
            b_strides.0 as isize,
            T::c(1.0),
            T::c(1.0),
            false,
            false,
            false,
            gemm::Parallelism::None,
        )
    }
}

fn conv_forward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], bias: &[T]) -> Vec<T> {
    let (p, ckk) = (g.plane(), g.c * g.k * g.k);
    let mut out = vec![T::default(); g.b * g.o * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::default(); ckk * p] };
    for n in 0..g.b {
        let xn = &x[n * g.c * g.h * g.w..][..g.c * g.h * g.w];
        let cols: &[T] = if g.is_pointwise() {
            xn
        } else {
            g.im2col(xn, &mut cols);
            &cols
        };
        let on = &mut out[n * g.o * p..][..g.o * p];
        for (o, row) in on.chunks_exact_mut(p).enumerate() {
            row.fill(bias[o]);
        }
        matmul(g.o, p, ckk, on, true, w, (ckk, 1), cols, (p, 1));
    }
    out
}

fn conv_backward<T: Real>(g: &ConvGeom, x: &[T], w: &[T], grad: &[T]) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (p, ckk) = (g.plane(), g.c * g.k * g.k);
    let mut gx = vec![T::default(); x.len()];
    let mut gw = vec![T::default(); w.len()];
    let mut gb = vec![T::default(); g.o];
    let mut cols = vec![T::default(); if g.is_pointwise() { 0 } else { ckk * p }];
    let mut dcols = vec![T::default(); if g.is_pointwise() { 0 } else { ckk * p }];
    for n in 0..g.b {
        let xn = &x[n * g.c * g.h * g.w..][..g.c * g.h * g.w];
        let gn = &grad[n * g.o * p..][..g.o * p];
        for (o, row) in gn.chunks_exact(p).enumerate() {
            gb[o] += row.iter().fold(T::default(), |acc, &v| acc + v);
        }
        let gxn = &mut gx[n * g.c * g.h * g.w..][..g.c * g.h * g.w];
        if g.is_pointwise() {
            matmul(g.o, ckk, p, &mut gw, true, gn, (p, 1), xn, (1, p));
            matmul(ckk, p, g.o, gxn, false, w, (1, ckk), gn, (p, 1));
        } else {
            g.im2col(xn, &mut cols);
            matmul(g.o, ckk, p, &mut gw, true, gn, (p, 1), &cols, (1, p));
            matmul(ckk, p, g.o, &mut dcols, false, w, (1, ckk), gn, (p, 1));
            g.col2im(&dcols, gxn);
        }
    }
    (gx, gw, gb)
}

/// Dense 2-D convolution with zero padding: `x` (B, C, H, W), `w` (O, C, k, k),
/// `bias` (O).
struct Conv {
    stride: usize,
    pad: usize,
}

impl CustomOp3 for Conv {
    fn name(&self) -> &'static str {
        "conv2d-gemm"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = ConvGeom::new(l1.shape(), l2.shape(), self.stride, self.pad)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(w), CpuStorage::F32(b)) => {
                CpuStorage::F32(conv_forward(
                    &g,
                    contiguous(x, l1, "conv2d")?,
                    contiguous(w, l2, "conv2d")?,
                    contiguous(b, l3, "conv2d")?,
                ))
            }
            (CpuStorage::F64(x), CpuStorage::F64(w), CpuStorage::F64(b)) => {
                CpuStorage::F64(conv_forward(
                    &g,
                    contiguous(x, l1, "conv2d")?,
                    contiguous(w, l2, "conv2d")?,
                    contiguous(b, l3, "conv2d")?,
                ))
            }
            _ => candle_core::bail!("conv2d: matching f32/f64 only"),
        };
        Ok((out, Shape::from((g.b, g.o, g.oh, g.ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        w: &Tensor,
        b: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let g = ConvGeom::new(x.shape(), w.shape(), self.stride, self.pad)?;
        let grad = grad.contiguous()?;
        fn run<T: Real + candle_core::WithDType>(
            g: &ConvGeom,
            x: &Tensor,
            w: &Tensor,
            grad: &Tensor,
        ) -> candle_core::Result<[Tensor; 3]> {
            let (gx, gw, gb) = conv_backward(
                g,
                &x.flatten_all()?.to_vec1::<T>()?,
                &w.flatten_all()?.to_vec1::<T>()?,
                &grad.flatten_all()?.to_vec1::<T>()?,
            );
            Ok([
                Tensor::from_vec(gx, x.shape(), x.device())?,
                Tensor::from_vec(gw, w.shape(), x.device())?,
                Tensor::from_vec(gb, g.o, x.device())?,
            ])
        }
        let [gx, gw, gb] = match x.dtype() {
            DType::F32 => run::<f32>(&g, x, w, &grad)?,
            DType::F64 => run::<f64>(&g, x, w, &grad)?,
            dt => candle_core::bail!("conv2d: unsupported dtype {dt:?}"),
        };
        Ok((Some(gx), Some(gw), Some(gb.reshape(b.shape())?)))
    }
}

/// `x`: (B, C, H, W); `w`: (O, C, k, k); `bias`: (O). Zero padding `pad` on
/// every side.
pub fn conv2d(
    x: &Tensor,
    w: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> candle_core::Result<Tensor> {
    x.contiguous()?
        .apply_op3(&w.contiguous()?, &bias.contiguous()?, Conv { stride, pad })
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    #[test]
    fn gelu_matches_reference_and_gradient() {
        let xs: Vec<f64> = (-40..=40).map(|i| i as f64 / 8.0).collect();
        let v = Var::new(xs.as_slice(), &Device::Cpu).unwrap();
        let y = gelu(v.as_tensor()).unwrap();
        let reference = v.as_tensor().gelu().unwrap();
        let diff = (&y - &reference).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-14);
        let g = y.sum_all().unwrap().backward().unwrap();
        let ours = g.get(v.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        for (x, d) in xs.iter().zip(ours) {
            let h = 1e-6;
            let fd = (gelu_value(x + h) - gelu_value(x - h)) / (2.0 * h);
            assert!((fd - d).abs() < 1e-8, "{x}: {fd} vs {d}");
        }
    }

    #[test]
    fn depthwise_matches_naive_and_shifts() {
        let x = Tensor::randn(0.0f64, 1.0, (2, 5, 6, 3), &Device::Cpu).unwrap();
        let w = Tensor::randn(0.0f64, 1.0, (3, 9), &Device::Cpu).unwrap();
        let ours = depthwise3x3(&x, &w).unwrap();
        let padded = x.pad_with_zeros(1, 1, 1).unwrap().pad_with_zeros(2, 1, 1).unwrap();
        let wt = w.t().unwrap().contiguous().unwrap();
        let mut acc = x.zeros_like().unwrap();
        for k in 0..9 {
            let s = padded.narrow(1, k / 3, 5).unwrap().narrow(2, k % 3, 6).unwrap();
            let tap = wt.narrow(0, k, 1).unwrap().reshape((1, 1, 1, 3)).unwrap();
            acc = (acc + s.broadcast_mul(&tap).unwrap()).unwrap();
        }
        let diff = (ours - acc).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() < 1e-12);
    }

    #[test]
    fn depthwise_backward_is_adjoint() {
        let xv = Var::from_tensor(&Tensor::randn(0.0f64, 1.0, (1, 4, 5, 2), &Device::Cpu).unwrap()).unwrap();
        let wv = Var::from_tensor(&Tensor::randn(0.0f64, 1.0, (2, 9), &Device::Cpu).unwrap()).unwrap();
        let g = Tensor::randn(0.0f64, 1.0, (1, 4, 5, 2), &Device::Cpu).unwrap();
        let y = depthwise3x3(xv.as_tensor(), wv.as_tensor()).unwrap();
        let loss = (&y * &g).unwrap().sum_all().unwrap();
        let grads = loss.backward().unwrap();
        // Linear in x: <y, g> = <x, grad_x>. Linear in w: <y, g> = <w, grad_w>.
        let l = loss.to_scalar::<f64>().unwrap();
        for var in [&xv, &wv] {
            let gv = grads.get(var.as_tensor()).unwrap();
            let ip = (gv * var.as_tensor()).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
            assert!((ip - l).abs() < 1e-10 * l.abs().max(1.0));
        }
    }
}
