//! Small tensor helpers shared by the network modules.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::error::{Error, Result};
use crate::grid::Mask;
use crate::kernels::{GroupNormOp, Im2Col, PatchGeometry};

/// Bilinear interpolation weights (`out` x `inp`, row-major), half-pixel
/// centres, clamped at the borders.
pub fn bilinear_weights(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let scale = inp as f64 / out as f64;
    for o in 0..out {
        let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
        let i0 = (src.floor() as usize).min(inp - 1);
        let i1 = (i0 + 1).min(inp - 1);
        let frac = src - i0 as f64;
        m[o * inp + i0] += 1.0 - frac;
        m[o * inp + i1] += frac;
    }
    m
}

/// Box-filter weights: target cell `o` averages the source interval
/// `[o * inp / out, (o + 1) * inp / out)`.
pub fn area_weights(out: usize, inp: usize) -> Vec<f64> {
    let mut m = vec![0.0; out * inp];
    let cell = inp as f64 / out as f64;
    for o in 0..out {
        let lo = o as f64 * cell;
        let hi = lo + cell;
        let mut i = lo.floor() as usize;
        while i < inp && (i as f64) < hi {
            let overlap = (hi.min(i as f64 + 1.0) - lo.max(i as f64)).max(0.0);
            m[o * inp + i] = overlap / cell;
            i += 1;
        }
    }
    m
}

/// Differentiable bilinear resize of a `(B, C, h, w)` tensor, done as two
/// matrix products with fixed interpolation weights.
pub fn resize_bilinear(x: &Tensor, height: usize, width: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if (h, w) == (height, width) {
        return Ok(x.clone());
    }
    let ry = Tensor::from_vec(bilinear_weights(height, h), (height, h), x.device())?.to_dtype(x.dtype())?;
    let rx = Tensor::from_vec(bilinear_weights(width, w), (width, w), x.device())?
        .to_dtype(x.dtype())?
        .t()?
        .contiguous()?;
    // (B*C*h, w) x (w, W) -> rows resized
    let cols = x.reshape((b * c * h, w))?.matmul(&rx)?;
    // (B*C, h, W) -> (B*C, W, h) x (h, H)^T -> (B*C, W, H)
    let t = cols.reshape((b * c, h, width))?.transpose(1, 2)?.contiguous()?;
    let rows = t.reshape((b * c * width, h))?.matmul(&ry.t()?.contiguous()?)?;
    Ok(rows.reshape((b * c, width, height))?.transpose(1, 2)?.contiguous()?.reshape((b, c, height, width))?)
}

/// Mask resized to a `height` x `width` grid: area interpolation, then
/// cells with coverage >= 0.5 are set.
pub fn mask_to_grid(mask: &Mask, height: usize, width: usize) -> Vec<u8> {
    let wy = area_weights(height, mask.height);
    let wx = area_weights(width, mask.width);
    // column pass then row pass
    let mut tmp = vec![0.0f64; mask.height * width];
    for y in 0..mask.height {
        let row = &mask.data[y * mask.width..(y + 1) * mask.width];
        for o in 0..width {
            let wrow = &wx[o * mask.width..(o + 1) * mask.width];
            tmp[y * width + o] = row.iter().zip(wrow).filter(|(&v, _)| v != 0).map(|(_, &k)| k).sum();
        }
    }
    let mut out = vec![0u8; height * width];
    for oy in 0..height {
        let wcol = &wy[oy * mask.height..(oy + 1) * mask.height];
        for ox in 0..width {
            let frac: f64 = (0..mask.height).filter(|&y| wcol[y] != 0.0).map(|y| wcol[y] * tmp[y * width + ox]).sum();
            out[oy * width + ox] = u8::from(frac >= 0.5 - 1e-12);
        }
    }
    out
}

/// 2-d convolution (no bias) as patch extraction plus one matrix product.
/// Same semantics as `Tensor::conv2d` with `groups = 1`.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize, dilation: usize) -> Result<Tensor> {
    let (b, c, h, wd) = x.dims4()?;
    let (co, ci, kh, kw) = w.dims4()?;
    if ci != c {
        return Err(Error::shape(format!("conv expects {ci} input channels, got {c}")));
    }
    if h + 2 * padding < dilation * (kh - 1) + 1 || wd + 2 * padding < dilation * (kw - 1) + 1 {
        return Err(Error::shape(format!("{h}x{wd} input too small for a {kh}x{kw} kernel")));
    }
    let geom = PatchGeometry { batch: b, channels: c, height: h, width: wd, kernel: (kh, kw), stride, padding, dilation };
    let (ho, wo) = geom.output();
    let col = x.contiguous()?.apply_op1(Im2Col(geom))?;
    let y = col.matmul(&w.reshape((co, ci * kh * kw))?.t()?)?; // (B*Ho*Wo, Co)
    Ok(y.reshape((b, ho * wo, co))?.transpose(1, 2)?.contiguous()?.reshape((b, co, ho, wo))?)
}

pub fn group_count(channels: usize) -> usize {
    [8, 4, 2, 1].into_iter().find(|g| channels % g == 0).unwrap_or(1)
}

/// Group normalisation with per-channel affine parameters.
pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor) -> Result<Tensor> {
    let (_, c, _, _) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return Err(Error::shape(format!("{c} channels not divisible into {groups} groups")));
    }
    if gamma.dims() != [c] || beta.dims() != [c] {
        return Err(Error::shape(format!("group norm affine parameters must be ({c},)")));
    }
    Ok(x.contiguous()?.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, GroupNormOp { groups, eps: 1e-5 })?)
}

/// Uniform `[-bound, bound]` initialisation drawn in f64 so f32 and f64
/// models built from the same seed agree.
pub fn uniform(shape: &[usize], bound: f64, rng: &mut impl Rng, dtype: DType, device: &Device) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(-bound..=bound)).collect();
    Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
}

pub fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Fails when any element is NaN or infinite.
pub fn check_finite(t: &Tensor, what: &str) -> Result<()> {
    let s = t.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if !s.is_finite() {
        return Err(Error::Numeric(format!("non-finite values in {what}")));
    }
    Ok(())
}
