//! Differentiable resizing of NCHW tensors.

use bsonet_core::resize::{interpolation_matrix, resize_plane};
use candle_core::{CpuStorage, CustomOp1, Device, Layout, Shape, Tensor};

use crate::error::Result;

/// Bicubic resize whose forward pass is the image-side resampler itself, so
/// network outputs agree with `resize_bicubic` to the last bit in f64.
struct Bicubic {
    out_h: usize,
    out_w: usize,
}

impl CustomOp1 for Bicubic {
    fn name(&self) -> &'static str {
        "bicubic-resize"
    }

    fn cpu_fwd(
        &self,
        storage: &CpuStorage,
        layout: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = layout.shape().dims4()?;
        let (start, end) = layout
            .contiguous_offsets()
            .ok_or_else(|| candle_core::Error::Msg("bicubic input must be contiguous".into()))?;
        let planes = b * c;
        let shape = Shape::from((b, c, self.out_h, self.out_w));
        let run = |src: &[f64]| -> Vec<f64> {
            let mut out = Vec::with_capacity(planes * self.out_h * self.out_w);
            for plane in src.chunks_exact(h * w) {
                out.extend(resize_plane(plane, h, w, self.out_h, self.out_w));
            }
            out
        };
        let out = match storage {
            CpuStorage::F64(v) => CpuStorage::F64(run(&v[start..end])),
            CpuStorage::F32(v) => {
                let wide: Vec<f64> = v[start..end].iter().map(|&x| x as f64).collect();
                CpuStorage::F32(run(&wide).into_iter().map(|x| x as f32).collect())
            }
            _ => candle_core::bail!("bicubic resize supports f32 and f64 only"),
        };
        Ok((out, shape))
    }

    fn bwd(
        &self,
        arg: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<Option<Tensor>> {
        let (_, _, h, w) = arg.dims4()?;
        let rh = matrix(h, self.out_h, grad_res)?;
        let rw = matrix(w, self.out_w, grad_res)?;
        let g = rh.t()?.broadcast_matmul(grad_res)?.broadcast_matmul(&rw)?;
        Ok(Some(g))
    }
}

fn matrix(in_len: usize, out_len: usize, like: &Tensor) -> candle_core::Result<Tensor> {
    Tensor::from_vec(
        interpolation_matrix(in_len, out_len),
        (out_len, in_len),
        &Device::Cpu,
    )?
    .to_dtype(like.dtype())
}

/// Bicubic resize of an NCHW tensor to `out_h x out_w`.
pub fn bicubic(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    Ok(x.contiguous()?.apply_op1(Bicubic { out_h, out_w })?)
}

/// `out_len x in_len` bilinear weights, half-pixel centers, clamped edges.
pub fn bilinear_matrix(in_len: usize, out_len: usize) -> Vec<f64> {
    let mut m = vec![0.0; out_len * in_len];
    let scale = in_len as f64 / out_len as f64;
    let last = in_len - 1;
    for o in 0..out_len {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(last);
        let i1 = (i0 + 1).min(last);
        let t = src - i0 as f64;
        m[o * in_len + i0] += 1.0 - t;
        m[o * in_len + i1] += t;
    }
    m
}

/// Bilinear resize of an NCHW tensor via two matrix products.
pub fn bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if (h, w) == (out_h, out_w) {
        return Ok(x.clone());
    }
    let rh = Tensor::from_vec(bilinear_matrix(h, out_h), (out_h, h), &Device::Cpu)?
        .to_dtype(x.dtype())?;
    let rw = Tensor::from_vec(bilinear_matrix(w, out_w), (out_w, w), &Device::Cpu)?
        .to_dtype(x.dtype())?;
    Ok(rh.broadcast_matmul(x)?.broadcast_matmul(&rw.t()?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use bsonet_core::resize::resize_bicubic;
    use bsonet_core::Image;

    #[test]
    fn forward_matches_image_resampler_exactly() {
        let img = Image::from_fn(13, 9, |r, c| ((r * 31 + c * 17) % 23) as f64 / 23.0).unwrap();
        let x = Tensor::from_vec(img.pixels().to_vec(), (1, 1, 9, 13), &Device::Cpu).unwrap();
        let y = bicubic(&x, 20, 7).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, resize_bicubic(&img, 20, 7).unwrap().into_pixels());
    }

    #[test]
    fn adjoint_identity() {
        // <R x, g> == <x, R^T g> for the forward op and its backward.
        let x = candle_core::Var::from_tensor(
            &Tensor::arange(0.0f64, 2.0 * 3.0 * 5.0 * 4.0, &Device::Cpu)
                .unwrap()
                .reshape((2, 3, 5, 4))
                .unwrap()
                .sin()
                .unwrap(),
        )
        .unwrap();
        let g = Tensor::arange(0.0f64, 2.0 * 3.0 * 8.0 * 7.0, &Device::Cpu)
            .unwrap()
            .reshape((2, 3, 8, 7))
            .unwrap()
            .cos()
            .unwrap();
        let y = bicubic(x.as_tensor(), 8, 7).unwrap();
        let lhs = (&y * &g).unwrap().sum_all().unwrap();
        let grads = lhs.backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap();
        let rhs = (gx * x.as_tensor()).unwrap().sum_all().unwrap();
        let (l, r) = (
            lhs.to_scalar::<f64>().unwrap(),
            rhs.to_scalar::<f64>().unwrap(),
        );
        assert!((l - r).abs() < 1e-10 * l.abs().max(1.0));
    }

    #[test]
    fn bilinear_rows_sum_to_one() {
        for (i, o) in [(4, 8), (16, 64), (5, 3), (7, 7)] {
            let m = bilinear_matrix(i, o);
            for row in m.chunks(i) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-15);
            }
        }
    }
}
