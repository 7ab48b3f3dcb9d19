//! CPU kernels with hand-written backward passes for the two hot spots of
//! the backbone: patch extraction for convolution and group normalisation.

use candle_core::backend::BackendStorage;
use candle_core::{CpuStorage, CustomOp1, CustomOp3, DType, Layout, Shape, Tensor};

fn to_f64(storage: &CpuStorage, layout: &Layout) -> candle_core::Result<Vec<f64>> {
    let (start, end) = layout
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("kernel input must be contiguous".into()))?;
    Ok(match storage {
        CpuStorage::F32(v) => v[start..end].iter().map(|&x| x as f64).collect(),
        CpuStorage::F64(v) => v[start..end].to_vec(),
        other => return Err(candle_core::Error::Msg(format!("unsupported dtype {:?}", other.dtype()))),
    })
}

fn from_f64(data: Vec<f64>, dtype: DType) -> candle_core::Result<CpuStorage> {
    Ok(match dtype {
        DType::F32 => CpuStorage::F32(data.into_iter().map(|x| x as f32).collect()),
        DType::F64 => CpuStorage::F64(data),
        other => return Err(candle_core::Error::Msg(format!("unsupported dtype {other:?}"))),
    })
}

fn tensor_f64(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()
}

#[derive(Clone, Copy, Debug)]
pub struct PatchGeometry {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl PatchGeometry {
    pub fn output(&self) -> (usize, usize) {
        let sh = self.dilation * (self.kernel.0 - 1) + 1;
        let sw = self.dilation * (self.kernel.1 - 1) + 1;
        ((self.height + 2 * self.padding - sh) / self.stride + 1, (self.width + 2 * self.padding - sw) / self.stride + 1)
    }

    fn cols(&self) -> usize {
        self.channels * self.kernel.0 * self.kernel.1
    }

    /// Visits (input index, column index) pairs for every in-bounds tap.
    fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = self.output();
        let (kh, kw) = self.kernel;
        let k = self.cols();
        for b in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let row = ((b * ho + oy) * wo + ox) * k;
                    for c in 0..self.channels {
                        let base = (b * self.channels + c) * self.height * self.width;
                        for ky in 0..kh {
                            let iy = (oy * self.stride + ky * self.dilation) as isize - self.padding as isize;
                            if iy < 0 || iy >= self.height as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * self.stride + kx * self.dilation) as isize - self.padding as isize;
                                if ix < 0 || ix >= self.width as isize {
                                    continue;
                                }
                                f(base + iy as usize * self.width + ix as usize, row + (c * kh + ky) * kw + kx);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// `(B, C, H, W)` -> `(B * Ho * Wo, C * kh * kw)`.
pub struct Im2Col(pub PatchGeometry);

/// Adjoint of [`Im2Col`].
pub struct Col2Im(pub PatchGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let x = to_f64(storage, layout)?;
        let (ho, wo) = g.output();
        let mut out = vec![0.0; g.batch * ho * wo * g.cols()];
        g.for_each(|i, o| out[o] = x[i]);
        Ok((from_f64(out, storage.dtype())?, Shape::from((g.batch * ho * wo, g.cols()))))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let cols = to_f64(storage, layout)?;
        let mut out = vec![0.0; g.batch * g.channels * g.height * g.width];
        g.for_each(|i, o| out[i] += cols[o]);
        Ok((from_f64(out, storage.dtype())?, Shape::from((g.batch, g.channels, g.height, g.width))))
    }
}

/// Group normalisation with per-channel scale and shift; inputs are
/// `(B, C, H, W)`, `(C,)`, `(C,)`.
pub struct GroupNormOp {
    pub groups: usize,
    pub eps: f64,
}

struct GnStats {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

impl GroupNormOp {
    fn stats(&self, x: &[f64], b: usize, c: usize, hw: usize) -> GnStats {
        let per = c / self.groups * hw;
        let mut mean = vec![0.0; b * self.groups];
        let mut inv_std = vec![0.0; b * self.groups];
        for (gi, chunk) in x.chunks(per).enumerate().take(b * self.groups) {
            let m = chunk.iter().sum::<f64>() / per as f64;
            let v = chunk.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / per as f64;
            mean[gi] = m;
            inv_std[gi] = 1.0 / (v + self.eps).sqrt();
        }
        GnStats { mean, inv_std }
    }
}

impl CustomOp3 for GroupNormOp {
    fn name(&self) -> &'static str {
        "group-norm"
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
        let (b, c, h, w) = l1.shape().dims4()?;
        let hw = h * w;
        let x = to_f64(s1, l1)?;
        let gamma = to_f64(s2, l2)?;
        let beta = to_f64(s3, l3)?;
        let st = self.stats(&x, b, c, hw);
        let cpg = c / self.groups;
        let mut out = vec![0.0; x.len()];
        for bi in 0..b {
            for ch in 0..c {
                let gi = bi * self.groups + ch / cpg;
                let (m, is) = (st.mean[gi], st.inv_std[gi]);
                let off = (bi * c + ch) * hw;
                for p in off..off + hw {
                    out[p] = (x[p] - m) * is * gamma[ch] + beta[ch];
                }
            }
        }
        Ok((from_f64(out, s1.dtype())?, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x_t: &Tensor,
        gamma_t: &Tensor,
        _beta: &Tensor,
        _res: &Tensor,
        grad_res: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let (b, c, h, w) = x_t.dims4()?;
        let hw = h * w;
        let x = tensor_f64(x_t)?;
        let gamma = tensor_f64(gamma_t)?;
        let dy = tensor_f64(grad_res)?;
        let st = self.stats(&x, b, c, hw);
        let cpg = c / self.groups;
        let per = (cpg * hw) as f64;
        let mut dx = vec![0.0; x.len()];
        let mut dgamma = vec![0.0; c];
        let mut dbeta = vec![0.0; c];
        for bi in 0..b {
            for g in 0..self.groups {
                let gi = bi * self.groups + g;
                let (m, is) = (st.mean[gi], st.inv_std[gi]);
                let (mut sum_d, mut sum_dx) = (0.0, 0.0);
                for ch in g * cpg..(g + 1) * cpg {
                    let off = (bi * c + ch) * hw;
                    for p in off..off + hw {
                        let xh = (x[p] - m) * is;
                        let d = dy[p] * gamma[ch];
                        sum_d += d;
                        sum_dx += d * xh;
                        dgamma[ch] += dy[p] * xh;
                        dbeta[ch] += dy[p];
                    }
                }
                let (mean_d, mean_dx) = (sum_d / per, sum_dx / per);
                for ch in g * cpg..(g + 1) * cpg {
                    let off = (bi * c + ch) * hw;
                    for p in off..off + hw {
                        let xh = (x[p] - m) * is;
                        dx[p] = is * (dy[p] * gamma[ch] - mean_d - xh * mean_dx);
                    }
                }
            }
        }
        let dev = x_t.device();
        let dt = x_t.dtype();
        Ok((
            Some(Tensor::from_vec(dx, (b, c, h, w), dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dgamma, c, dev)?.to_dtype(dt)?),
            Some(Tensor::from_vec(dbeta, c, dev)?.to_dtype(dt)?),
        ))
    }
}
