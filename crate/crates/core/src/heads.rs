//! Per-step segmentation heads, both prediction paths and the losses.

use candle_core::{DType, Tensor, D};
use rand::Rng;

use crate::error::{Error, Result};
use crate::labels::ChannelLayout;
use crate::params::{Group, ParameterRegistry};
use crate::semantic::ProposalBatch;
use crate::tensor_ops::{check_finite, resize_bilinear, uniform};

/// Dense head (bias-free 1x1 bank over f_out) and prototype head (affine
/// map over p_out) for each step.
#[derive(Clone, Debug)]
pub struct StepHeads {
    pub layout: ChannelLayout,
    pub dense_dim: usize,
    pub proto_dim: usize,
}

impl StepHeads {
    pub fn new(layout: ChannelLayout, dense_dim: usize, proto_dim: usize) -> Self {
        Self { layout, dense_dim, proto_dim }
    }

    pub fn add_head(&self, reg: &mut ParameterRegistry, rng: &mut impl Rng, step: usize) -> Result<()> {
        if step == 0 || step > self.layout.num_steps() {
            return Err(Error::config(format!("no classes defined for step {step}")));
        }
        let out = self.layout.head_width(step);
        let (dt, dev) = (reg.dtype(), reg.device().clone());
        let g = Group::Head(step);
        let bd = (1.0 / self.dense_dim as f64).sqrt();
        let bp = (1.0 / self.proto_dim as f64).sqrt();
        reg.add(g, "dense.weight", uniform(&[out, self.dense_dim], bd, rng, dt, &dev)?)?;
        reg.add(g, "proto.weight", uniform(&[out, self.proto_dim], bp, rng, dt, &dev)?)?;
        reg.add(g, "proto.bias", uniform(&[out], bp, rng, dt, &dev)?)?;
        Ok(())
    }

    fn weight(&self, reg: &ParameterRegistry, step: usize, local: &str) -> Result<Tensor> {
        reg.get(&format!("heads.{step}.{local}"))
            .map_err(|_| Error::config(format!("head for step {step} has not been created")))
    }

    /// Dense logits of heads `1..=upto`, channel-concatenated and
    /// upsampled to `out_hw`.
    pub fn predict_dense(&self, reg: &ParameterRegistry, f_out: &Tensor, upto: usize, out_hw: (usize, usize)) -> Result<Tensor> {
        let (b, d, h, w) = f_out.dims4()?;
        if d != self.dense_dim {
            return Err(Error::shape(format!("dense heads expect {} channels, got {d}", self.dense_dim)));
        }
        let flat = f_out.reshape((b, d, h * w))?;
        let mut parts = Vec::with_capacity(upto);
        for s in 1..=upto {
            parts.push(self.weight(reg, s, "dense.weight")?.broadcast_matmul(&flat)?);
        }
        let y = Tensor::cat(&parts, 1)?;
        let c = y.dim(1)?;
        resize_bilinear(&y.reshape((b, c, h, w))?, out_hw.0, out_hw.1)
    }

    /// Prototype-head logits `(B, N, N_cls)` of heads `1..=upto`.
    pub fn proposal_logits(&self, reg: &ParameterRegistry, p_out: &Tensor, upto: usize) -> Result<Tensor> {
        if p_out.dim(D::Minus1)? != self.proto_dim {
            return Err(Error::shape(format!("prototype heads expect {} columns, got {:?}", self.proto_dim, p_out.dims())));
        }
        let mut parts = Vec::with_capacity(upto);
        for s in 1..=upto {
            let wt = self.weight(reg, s, "proto.weight")?;
            let bias = self.weight(reg, s, "proto.bias")?;
            parts.push(p_out.broadcast_matmul(&wt.t()?)?.broadcast_add(&bias)?);
        }
        Ok(Tensor::cat(&parts, D::Minus1)?)
    }
}

#[derive(Clone, Debug)]
pub struct ProposalPrediction {
    /// `(B, N_cls, H, W)`
    pub y2: Tensor,
    /// `(B, 1, H, W)` 1.0 where at least one proposal covers the pixel.
    pub covered: Tensor,
}

/// Spreads per-proposal logits over their masks and averages over the
/// proposals covering each feature cell, then upsamples to `out_hw`.
pub fn predict_proposal(logits: &Tensor, proposals: &ProposalBatch, out_hw: (usize, usize)) -> Result<ProposalPrediction> {
    let (b, n, c) = logits.dims3()?;
    let (mb, mn, _) = proposals.masks.dims3()?;
    if (b, n) != (mb, mn) {
        return Err(Error::shape(format!("{n} proposal logits per image vs {mn} masks")));
    }
    let (h, w) = proposals.grid;
    let masks = proposals.masks.to_dtype(logits.dtype())?;
    let summed = logits.transpose(1, 2)?.contiguous()?.matmul(&masks)?; // (B, C, hw)
    let coverage = masks.sum_keepdim(1)?; // (B, 1, hw)
    let y = summed.broadcast_div(&coverage.maximum(1.0)?)?;
    let y2 = resize_bilinear(&y.reshape((b, c, h, w))?, out_hw.0, out_hw.1)?;
    let covered = nearest_upsample(&coverage.gt(0.0)?.to_dtype(logits.dtype())?.reshape((b, 1, h, w))?, out_hw)?;
    Ok(ProposalPrediction { y2, covered })
}

fn nearest_upsample(x: &Tensor, out_hw: (usize, usize)) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    let rows: Vec<u32> = (0..out_hw.0).map(|o| (((o as f64 + 0.5) * h as f64 / out_hw.0 as f64) as usize).min(h - 1) as u32).collect();
    let cols: Vec<u32> = (0..out_hw.1).map(|o| (((o as f64 + 0.5) * w as f64 / out_hw.1 as f64) as usize).min(w - 1) as u32).collect();
    let dev = x.device();
    let r = Tensor::from_vec(rows, out_hw.0, dev)?;
    let cidx = Tensor::from_vec(cols, out_hw.1, dev)?;
    Ok(x.index_select(&r, 2)?.index_select(&cidx, 3)?)
}

/// Mean binary cross-entropy on logits over the entries where `valid`
/// (`(B, 1, H, W)`) is set, across all channels.
pub fn masked_bce(logits: &Tensor, targets: &Tensor, valid: &Tensor) -> Result<Tensor> {
    if logits.dims() != targets.dims() {
        return Err(Error::shape(format!("logits {:?} vs targets {:?}", logits.dims(), targets.dims())));
    }
    check_finite(logits, "logits")?;
    let c = logits.dim(1)? as f64;
    let elem = ((logits.relu()? - (logits * targets)?)? + (logits.abs()?.neg()?.exp()? + 1.0)?.log()?)?;
    let n = valid.sum_all()?.to_dtype(DType::F64)?.to_scalar::<f64>()?;
    if n == 0.0 {
        return Ok(Tensor::zeros((), logits.dtype(), logits.device())?);
    }
    Ok((elem.broadcast_mul(valid)?.sum_all()? / (n * c))?)
}

/// Dense plus proposal term at step 1, proposal term only afterwards.
pub fn bce_objective(
    y1: &Tensor,
    y2: &ProposalPrediction,
    targets: &Tensor,
    valid: &Tensor,
    step: usize,
) -> Result<Tensor> {
    let valid2 = (valid * &y2.covered)?;
    let l2 = masked_bce(&y2.y2, targets, &valid2)?;
    if step == 1 {
        Ok((masked_bce(y1, targets, valid)? + l2)?)
    } else {
        Ok(l2)
    }
}

/// Unit-normalised mean of the step-1 prototype-head outputs per cluster.
/// `members[j]` lists flat `(image * N + proposal)` rows; empty clusters
/// are dropped. Returns `None` when every cluster is empty.
pub fn cluster_predictions(head1_logits: &Tensor, members: &[Vec<usize>]) -> Result<Option<Tensor>> {
    let (b, n, c) = head1_logits.dims3()?;
    let rows = b * n;
    let live: Vec<&Vec<usize>> = members.iter().filter(|m| !m.is_empty()).collect();
    if live.is_empty() {
        return Ok(None);
    }
    let mut a = vec![0f64; live.len() * rows];
    for (j, m) in live.iter().enumerate() {
        for &r in m.iter() {
            if r >= rows {
                return Err(Error::shape(format!("cluster member {r} outside {rows} proposals")));
            }
            a[j * rows + r] += 1.0 / m.len() as f64;
        }
    }
    let a = Tensor::from_vec(a, (live.len(), rows), head1_logits.device())?.to_dtype(head1_logits.dtype())?;
    let mean = a.matmul(&head1_logits.reshape((rows, c))?)?;
    let norm = (mean.sqr()?.sum_keepdim(1)? + 1e-24)?.sqrt()?;
    Ok(Some(mean.broadcast_div(&norm)?))
}

/// Contrastive loss over unit cluster vectors `(K, d)`: mean over clusters
/// of `-log softmax_j(o_j . o_m)` at `m = j`.
pub fn contrastive_unseen_loss(o: &Tensor) -> Result<Tensor> {
    let (k, _) = o.dims2()?;
    if k == 0 {
        return Err(Error::config("contrastive loss needs at least one cluster"));
    }
    let s = o.matmul(&o.t()?)?;
    let max = s.max_keepdim(1)?.detach();
    let lse = (s.broadcast_sub(&max)?.exp()?.sum_keepdim(1)?.log()? + max)?;
    let eye = Tensor::eye(k, o.dtype(), o.device())?;
    let diag = (&s * eye)?.sum_keepdim(1)?;
    Ok((lse - diag)?.mean_all()?)
}

pub fn total_loss(bce: &Tensor, lc: &Tensor) -> Result<Tensor> {
    Ok((bce + lc)?)
}

/// Sigmoid, for turning logits into the scores pseudo-labelling reads.
pub fn sigmoid(x: &Tensor) -> Result<Tensor> {
    Ok(Tensor::ones_like(x)?.broadcast_div(&(x.neg()?.exp()? + 1.0)?)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::ProposalSet;
    use crate::grid::Mask;
    use crate::seed;
    use crate::tensor_ops::to_f64_vec;
    use candle_core::Device;
    use rand::Rng;

    fn scalar(t: &Tensor) -> f64 {
        t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn contrastive_identities() {
        let dev = Device::Cpu;
        let one = Tensor::from_vec(vec![0.6f64, 0.8], (1, 2), &dev).unwrap();
        assert_eq!(scalar(&contrastive_unseen_loss(&one).unwrap()), 0.0);
        let same = Tensor::from_vec(vec![0.6f64, 0.8, 0.6, 0.8], (2, 2), &dev).unwrap();
        assert!((scalar(&contrastive_unseen_loss(&same).unwrap()) - 2f64.ln()).abs() < 1e-9);
        let orth = Tensor::from_vec(vec![1f64, 0., 0., 1.], (2, 2), &dev).unwrap();
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((scalar(&contrastive_unseen_loss(&orth).unwrap()) - expect).abs() < 1e-9);
        assert!(contrastive_unseen_loss(&Tensor::zeros((0, 2), DType::F64, &dev).unwrap()).is_err());
    }

    #[test]
    fn contrastive_rotation_and_permutation_invariant() {
        let dev = Device::Cpu;
        let o = Tensor::from_vec(vec![1f64, 0., 0.6, 0.8, 0., 1.], (3, 2), &dev).unwrap();
        let base = scalar(&contrastive_unseen_loss(&o).unwrap());
        let (c, s) = (0.3f64.cos(), 0.3f64.sin());
        let rot = Tensor::from_vec(vec![c, -s, s, c], (2, 2), &dev).unwrap();
        let r = scalar(&contrastive_unseen_loss(&o.matmul(&rot).unwrap()).unwrap());
        let perm = Tensor::from_vec(vec![0f64, 1., 1., 0., 0.6, 0.8], (3, 2), &dev).unwrap();
        let p = scalar(&contrastive_unseen_loss(&perm).unwrap());
        assert!((base - r).abs() < 1e-12 && (base - p).abs() < 1e-12);
    }

    #[test]
    fn bce_zero_logits_is_ln2() {
        let dev = Device::Cpu;
        let x = Tensor::zeros((1, 3, 2, 2), DType::F64, &dev).unwrap();
        let t = Tensor::from_vec((0..12).map(|i| (i % 2) as f64).collect::<Vec<_>>(), (1, 3, 2, 2), &dev).unwrap();
        let v = Tensor::from_vec(vec![1f64, 0., 1., 1.], (1, 1, 2, 2), &dev).unwrap();
        assert!((scalar(&masked_bce(&x, &t, &v).unwrap()) - 2f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn bce_saturates_and_matches_loop() {
        let dev = Device::Cpu;
        let t = Tensor::from_vec(vec![1f64, 0., 0., 1.], (1, 2, 1, 2), &dev).unwrap();
        let x = ((&t * 40.0).unwrap() - 20.0).unwrap();
        let v = Tensor::ones((1, 1, 1, 2), DType::F64, &dev).unwrap();
        assert!(scalar(&masked_bce(&x, &t, &v).unwrap()) < 1e-3);

        let mut rng = seed::rng(&[3]);
        let xs: Vec<f64> = (0..24).map(|_| rng.gen_range(-4.0..4.0)).collect();
        let ts: Vec<f64> = (0..24).map(|_| f64::from(rng.gen_bool(0.3))).collect();
        let vs: Vec<f64> = (0..8).map(|_| f64::from(rng.gen_bool(0.7))).collect();
        let got = scalar(
            &masked_bce(
                &Tensor::from_vec(xs.clone(), (2, 3, 2, 2), &dev).unwrap(),
                &Tensor::from_vec(ts.clone(), (2, 3, 2, 2), &dev).unwrap(),
                &Tensor::from_vec(vs.clone(), (2, 1, 2, 2), &dev).unwrap(),
            )
            .unwrap(),
        );
        let (mut s, mut n) = (0.0, 0.0);
        for b in 0..2 {
            for c in 0..3 {
                for p in 0..4 {
                    if vs[b * 4 + p] == 1.0 {
                        let i = (b * 3 + c) * 4 + p;
                        let sig = 1.0 / (1.0 + (-xs[i]).exp());
                        s += -(ts[i] * sig.ln() + (1.0 - ts[i]) * (1.0 - sig).ln());
                        n += 1.0;
                    }
                }
            }
        }
        assert!((got - s / n).abs() < 1e-6 * (s / n));
        let nan = Tensor::from_vec(vec![f64::NAN, 0.], (1, 2, 1, 1), &dev).unwrap();
        assert!(masked_bce(&nan, &nan, &Tensor::ones((1, 1, 1, 1), DType::F64, &dev).unwrap()).is_err());
    }

    fn batch(masks: Vec<Mask>, h: usize, w: usize) -> ProposalBatch {
        let n = masks.len();
        let set = ProposalSet::new(h, w, masks, vec![true; n]).unwrap();
        ProposalBatch::new(&[&set], (h, w), DType::F64, &Device::Cpu).unwrap()
    }

    #[test]
    fn proposal_prediction_cases() {
        let dev = Device::Cpu;
        let pb = batch(vec![Mask::filled(2, 2, 1)], 2, 2);
        let l = Tensor::from_vec(vec![1.5f64, -2.0], (1, 1, 2), &dev).unwrap();
        let y = to_f64_vec(&predict_proposal(&l, &pb, (2, 2)).unwrap().y2).unwrap();
        assert_eq!(y, vec![1.5, 1.5, 1.5, 1.5, -2.0, -2.0, -2.0, -2.0]);

        let pb = batch(vec![Mask::from_vec(1, 2, vec![1, 0]).unwrap(), Mask::from_vec(1, 2, vec![0, 1]).unwrap()], 1, 2);
        let l = Tensor::from_vec(vec![1f64, 2.], (1, 2, 1), &dev).unwrap();
        assert_eq!(to_f64_vec(&predict_proposal(&l, &pb, (1, 2)).unwrap().y2).unwrap(), vec![1.0, 2.0]);
        assert!(predict_proposal(&Tensor::zeros((1, 3, 1), DType::F64, &dev).unwrap(), &pb, (1, 2)).is_err());
    }

    #[test]
    fn proposal_prediction_matches_loop_oracle() {
        let dev = Device::Cpu;
        let mut rng = seed::rng(&[21]);
        for case in 0..10 {
            let (h, w, n, c) = (3 + case % 3, 4, 5, 2 + case % 2);
            let masks: Vec<Mask> = (0..n)
                .map(|_| Mask::from_vec(h, w, (0..h * w).map(|_| u8::from(rng.gen_bool(0.4))).collect()).unwrap())
                .collect();
            let lv: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
            let pb = batch(masks.clone(), h, w);
            let pred = predict_proposal(&Tensor::from_vec(lv.clone(), (1, n, c), &dev).unwrap(), &pb, (h, w)).unwrap();
            let y = to_f64_vec(&pred.y2).unwrap();
            let cov = to_f64_vec(&pred.covered).unwrap();
            for p in 0..h * w {
                let covering: Vec<usize> = (0..n).filter(|&j| masks[j].data[p] != 0).collect();
                assert_eq!(cov[p] == 1.0, !covering.is_empty());
                for ch in 0..c {
                    let expect = if covering.is_empty() {
                        0.0
                    } else {
                        covering.iter().map(|&j| lv[j * c + ch]).sum::<f64>() / covering.len() as f64
                    };
                    let got = y[ch * h * w + p];
                    assert!((got - expect).abs() <= 1e-6 * expect.abs().max(1e-9));
                }
            }
        }
    }

    #[test]
    fn dense_head_channels() {
        let layout = ChannelLayout::new(1, vec![vec![1, 2], vec![3, 4]]).unwrap();
        let heads = StepHeads::new(layout, 6, 8);
        let mut reg = ParameterRegistry::new(DType::F64, Device::Cpu);
        let mut rng = seed::rng(&[1]);
        heads.add_head(&mut reg, &mut rng, 1).unwrap();
        let f = Tensor::randn(0f64, 1., (2, 6, 2, 2), &Device::Cpu).unwrap();
        assert_eq!(heads.predict_dense(&reg, &f, 1, (4, 4)).unwrap().dims(), &[2, 4, 4, 4]);
        assert!(heads.predict_dense(&reg, &f, 2, (4, 4)).is_err());
        heads.add_head(&mut reg, &mut rng, 2).unwrap();
        let y = heads.predict_dense(&reg, &f, 2, (2, 2)).unwrap();
        assert_eq!(y.dims(), &[2, 6, 2, 2]);
        let w2 = reg.get("heads.2.dense.weight").unwrap();
        let expect = w2.broadcast_matmul(&f.reshape((2, 6, 4)).unwrap()).unwrap();
        assert_eq!(to_f64_vec(&y.narrow(1, 4, 2).unwrap()).unwrap(), to_f64_vec(&expect).unwrap());
        let zero = Tensor::zeros((1, 6, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(to_f64_vec(&heads.predict_dense(&reg, &zero, 2, (2, 2)).unwrap()).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cluster_vectors_are_unit_means() {
        let dev = Device::Cpu;
        let l = Tensor::from_vec(vec![3f64, 0., 1., 0., 0., 2.], (1, 3, 2), &dev).unwrap();
        let o = cluster_predictions(&l, &[vec![0, 1], vec![], vec![2]]).unwrap().unwrap();
        assert_eq!(to_f64_vec(&o).unwrap(), vec![1.0, 0.0, 0.0, 1.0]);
        assert!(cluster_predictions(&l, &[vec![]]).unwrap().is_none());
        let t = total_loss(&Tensor::new(0.5f64, &dev).unwrap(), &Tensor::new(0.3f64, &dev).unwrap()).unwrap();
        assert!((scalar(&t) - 0.8).abs() < 1e-15);
    }

}
