//! Proposal prototypes: masked average pooling of the mined features and
//! of f_out, plus the blend MLP over the low-level prototypes.

use candle_core::{DType, Device, Tensor};
use rand::Rng;

use crate::data::ProposalSet;
use crate::error::{Error, Result};
use crate::params::{Group, ParameterRegistry};
use crate::tensor_ops::{mask_to_grid, uniform};

/// Proposal masks of a batch, resampled to the feature grid.
#[derive(Clone, Debug)]
pub struct ProposalBatch {
    pub n: usize,
    pub grid: (usize, usize),
    /// `(B, N, h*w)` binary masks; padding and empty masks are all zero.
    pub masks: Tensor,
    /// `(B, N, h*w)` masks divided by their pixel count.
    pub pool: Tensor,
    /// `(B, N)` 1.0 for usable proposals (valid and non-empty on the grid).
    pub usable: Tensor,
    pub valid: Vec<Vec<bool>>,
}

impl ProposalBatch {
    pub fn new(sets: &[&ProposalSet], grid: (usize, usize), dtype: DType, device: &Device) -> Result<Self> {
        if sets.is_empty() {
            return Err(Error::shape("empty proposal batch"));
        }
        let n = sets.iter().map(|s| s.len()).max().unwrap_or(0).max(1);
        let hw = grid.0 * grid.1;
        let b = sets.len();
        let mut masks = vec![0f64; b * n * hw];
        let mut pool = vec![0f64; b * n * hw];
        let mut usable = vec![0f64; b * n];
        let mut valid = Vec::with_capacity(b);
        for (bi, set) in sets.iter().enumerate() {
            let mut flags = vec![false; n];
            for j in 0..set.len() {
                flags[j] = set.valid[j];
                if !set.valid[j] {
                    continue;
                }
                let cells = mask_to_grid(&set.masks[j], grid.0, grid.1);
                let count = cells.iter().filter(|&&v| v != 0).count();
                if count == 0 {
                    continue;
                }
                let off = (bi * n + j) * hw;
                for (p, &v) in cells.iter().enumerate() {
                    if v != 0 {
                        masks[off + p] = 1.0;
                        pool[off + p] = 1.0 / count as f64;
                    }
                }
                usable[bi * n + j] = 1.0;
            }
            valid.push(flags);
        }
        let mk = |data: Vec<f64>, shape: &[usize]| -> Result<Tensor> {
            Ok(Tensor::from_vec(data, shape, device)?.to_dtype(dtype)?)
        };
        Ok(Self {
            n,
            grid,
            masks: mk(masks, &[b, n, hw])?,
            pool: mk(pool, &[b, n, hw])?,
            usable: mk(usable, &[b, n])?,
            valid,
        })
    }
}

/// `(B, c, h, w)` feature pooled under each proposal: `(B, N, c)`.
/// Empty or invalid proposals give zero rows.
pub fn masked_average_pool(feature: &Tensor, proposals: &ProposalBatch) -> Result<Tensor> {
    let (b, c, h, w) = feature.dims4()?;
    if (h, w) != proposals.grid {
        return Err(Error::shape(format!("feature grid {:?} vs proposal grid {:?}", (h, w), proposals.grid)));
    }
    let flat = feature.reshape((b, c, h * w))?.transpose(1, 2)?.contiguous()?;
    Ok(proposals.pool.matmul(&flat)?)
}

#[derive(Clone, Debug)]
pub struct BlendMlp {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub output_dim: usize,
}

impl BlendMlp {
    pub fn new(reg: &mut ParameterRegistry, rng: &mut impl Rng, input_dim: usize, hidden_dim: usize, output_dim: usize) -> Result<Self> {
        let (dt, dev) = (reg.dtype(), reg.device().clone());
        let b1 = (1.0 / input_dim as f64).sqrt();
        let b2 = (1.0 / hidden_dim as f64).sqrt();
        reg.add(Group::BlendMlp, "fc1.weight", uniform(&[hidden_dim, input_dim], b1, rng, dt, &dev)?)?;
        reg.add(Group::BlendMlp, "fc1.bias", uniform(&[hidden_dim], b1, rng, dt, &dev)?)?;
        reg.add(Group::BlendMlp, "fc2.weight", uniform(&[output_dim, hidden_dim], b2, rng, dt, &dev)?)?;
        reg.add(Group::BlendMlp, "fc2.bias", uniform(&[output_dim], b2, rng, dt, &dev)?)?;
        Ok(Self { input_dim, hidden_dim, output_dim })
    }

    /// Row-wise MLP on `(..., input_dim)`.
    pub fn forward(&self, reg: &ParameterRegistry, x: &Tensor) -> Result<Tensor> {
        let h = x
            .broadcast_matmul(&reg.get("blend_mlp.fc1.weight")?.t()?)?
            .broadcast_add(&reg.get("blend_mlp.fc1.bias")?)?
            .relu()?;
        Ok(h.broadcast_matmul(&reg.get("blend_mlp.fc2.weight")?.t()?)?
            .broadcast_add(&reg.get("blend_mlp.fc2.bias")?)?)
    }
}

/// Sums the low-level prototypes and passes the sum through the MLP.
pub fn blend_prototypes(reg: &ParameterRegistry, low: &[Tensor], mlp: &BlendMlp) -> Result<Tensor> {
    let first = low.first().ok_or_else(|| Error::shape("no low-level prototypes to blend"))?;
    let mut sum = first.clone();
    for p in &low[1..] {
        if p.dims() != first.dims() {
            return Err(Error::shape(format!("prototype shapes differ: {:?} vs {:?}", p.dims(), first.dims())));
        }
        sum = (sum + p)?;
    }
    if first.dims().last() != Some(&mlp.input_dim) {
        return Err(Error::shape(format!("blend expects {} columns, got {:?}", mlp.input_dim, first.dims())));
    }
    mlp.forward(reg, &sum)
}

/// Column concatenation `[p4 | p_b]`.
pub fn enhance(p4: &Tensor, pb: &Tensor) -> Result<Tensor> {
    let r4 = &p4.dims()[..p4.rank() - 1];
    let rb = &pb.dims()[..pb.rank() - 1];
    if r4 != rb {
        return Err(Error::shape(format!("row mismatch {:?} vs {:?}", p4.dims(), pb.dims())));
    }
    Ok(Tensor::cat(&[p4, pb], p4.rank() - 1)?)
}

#[derive(Clone, Debug)]
pub struct PrototypeOutput {
    /// Pooled from f_out.
    pub p4: Tensor,
    pub pb: Option<Tensor>,
    pub p_out: Tensor,
}

/// Pools every source and assembles `p_out`. `blend` is `None` when
/// semantic enhancement is disabled or there are no mined features.
pub fn semantic_enhancement(
    reg: &ParameterRegistry,
    knowledge: &[Tensor],
    f_out: &Tensor,
    proposals: &ProposalBatch,
    blend: Option<&BlendMlp>,
) -> Result<PrototypeOutput> {
    let p4 = masked_average_pool(f_out, proposals)?;
    let pb = match blend {
        Some(mlp) if !knowledge.is_empty() => {
            let low = knowledge.iter().map(|k| masked_average_pool(k, proposals)).collect::<Result<Vec<_>>>()?;
            // padding rows stay zero even with biased layers
            Some(blend_prototypes(reg, &low, mlp)?.broadcast_mul(&proposals.usable.unsqueeze(2)?)?)
        }
        _ => None,
    };
    let p_out = match &pb {
        Some(pb) => enhance(&p4, pb)?,
        None => p4.clone(),
    };
    Ok(PrototypeOutput { p4, pb, p_out })
}
