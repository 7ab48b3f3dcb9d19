//! The full network: backbone, evolving fusion, proposal prototypes and the
//! per-step heads.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::data::ProposalSet;
use crate::error::{Error, Result};
use crate::fusion::{EvolvingFusion, FusionConfig, FusionOutput};
use crate::grid::RgbImage;
use crate::heads::{predict_proposal, ProposalPrediction, StepHeads};
use crate::labels::ChannelLayout;
use crate::params::ParameterRegistry;
use crate::semantic::{semantic_enhancement, BlendMlp, PrototypeOutput, ProposalBatch};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub backbone: BackboneConfig,
    pub fusion: FusionConfig,
    /// Blend the low-level prototypes into p_out.
    pub semantic_enhancement: bool,
    pub hidden_dim: usize,
    pub blend_dim: usize,
}

#[derive(Clone, Debug)]
pub struct EndingModel {
    pub spec: ModelSpec,
    pub backbone: Backbone,
    pub fusion: EvolvingFusion,
    pub blend: Option<BlendMlp>,
    pub heads: StepHeads,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub fusion: FusionOutput,
    pub prototypes: PrototypeOutput,
    pub proposals: ProposalBatch,
    /// `(B, N, N_cls)`
    pub proposal_logits: Tensor,
    /// `(B, N_cls, H, W)`
    pub y1: Tensor,
    pub y2: ProposalPrediction,
}

impl ForwardOutput {
    /// Proposal prediction where some proposal covers the pixel, dense
    /// prediction elsewhere.
    pub fn combined(&self) -> Result<Tensor> {
        let cov = self.y2.covered.broadcast_as(self.y1.shape())?;
        Ok(((&self.y2.y2 * &cov)? + (&self.y1 * (1.0 - &cov)?)?)?)
    }
}

/// `(B, 3, H, W)` tensor from equally sized images, centred around zero.
pub fn images_to_tensor(images: &[&RgbImage], dtype: DType, device: &Device) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::shape("empty image batch"))?;
    let (h, w) = first.dims();
    let mut data = Vec::with_capacity(images.len() * 3 * h * w);
    for img in images {
        if img.dims() != (h, w) {
            return Err(Error::shape(format!("image {:?} in a {h}x{w} batch", img.dims())));
        }
        for c in 0..3 {
            data.extend(img.data.iter().map(|px| px[c] - 0.5));
        }
    }
    Ok(Tensor::from_vec(data, (images.len(), 3, h, w), device)?.to_dtype(dtype)?)
}

impl EndingModel {
    /// Builds every parameter except the step heads.
    pub fn new(spec: ModelSpec, layout: ChannelLayout, reg: &mut ParameterRegistry, rng: &mut impl Rng) -> Result<Self> {
        let backbone = Backbone::new(spec.backbone.clone(), reg, rng)?;
        let fusion = EvolvingFusion::new(spec.fusion.clone(), &spec.backbone, reg, rng)?;
        let m = spec.fusion.mined_channels_m;
        let blend = if spec.semantic_enhancement && !spec.fusion.active_levels().is_empty() {
            Some(BlendMlp::new(reg, rng, m, spec.hidden_dim, spec.blend_dim)?)
        } else {
            None
        };
        let dense_dim = fusion.out_channels();
        let proto_dim = dense_dim + blend.as_ref().map_or(0, |b| b.output_dim);
        let heads = StepHeads::new(layout, dense_dim, proto_dim);
        Ok(Self { spec, backbone, fusion, blend, heads })
    }

    pub fn layout(&self) -> &ChannelLayout {
        &self.heads.layout
    }

    pub fn forward(&self, reg: &ParameterRegistry, images: &Tensor, proposals: &[&ProposalSet], upto: usize) -> Result<ForwardOutput> {
        let (_, _, h, w) = images.dims4()?;
        let pyramid = self.backbone.extract_features(reg, images)?;
        let fusion = self.fusion.forward(reg, &pyramid)?;
        let (_, _, fh, fw) = fusion.f_out.dims4()?;
        let batch = ProposalBatch::new(proposals, (fh, fw), images.dtype(), images.device())?;
        let prototypes = semantic_enhancement(reg, &fusion.knowledge, &fusion.f_out, &batch, self.blend.as_ref())?;
        let proposal_logits = self.heads.proposal_logits(reg, &prototypes.p_out, upto)?;
        let y1 = self.heads.predict_dense(reg, &fusion.f_out, upto, (h, w))?;
        let y2 = predict_proposal(&proposal_logits, &batch, (h, w))?;
        Ok(ForwardOutput { fusion, prototypes, proposals: batch, proposal_logits, y1, y2 })
    }

    /// Per-pixel class ids (unknown channels map to background).
    pub fn predict(&self, reg: &ParameterRegistry, images: &Tensor, proposals: &[&ProposalSet], upto: usize) -> Result<Vec<Vec<u8>>> {
        let out = self.forward(reg, images, proposals, upto)?;
        let arg = out.combined()?.argmax(1)?.to_dtype(DType::U32)?; // (B, H, W)
        let b = arg.dim(0)?;
        let layout = self.layout().up_to(upto);
        (0..b)
            .map(|i| Ok(arg.get(i)?.flatten_all()?.to_vec1::<u32>()?.into_iter().map(|c| layout.class_of(c as usize)).collect()))
            .collect()
    }

    /// Sigmoid scores `(B, N_cls, H, W)` used for pseudo-labelling.
    pub fn scores(&self, reg: &ParameterRegistry, images: &Tensor, proposals: &[&ProposalSet], upto: usize) -> Result<Tensor> {
        let out = self.forward(reg, images, proposals, upto)?;
        crate::heads::sigmoid(&out.combined()?.detach())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ScalePreset;
    use crate::data::oracle_proposals;
    use crate::fusion::FusionMode;
    use crate::grid::LabelMap;
    use crate::seed;

    fn toy_spec(mode: FusionMode, se: bool) -> ModelSpec {
        ModelSpec {
            backbone: BackboneConfig::preset(ScalePreset::Toy),
            fusion: FusionConfig::new(mode, 16),
            semantic_enhancement: se,
            hidden_dim: 16,
            blend_dim: 16,
        }
    }

    #[test]
    fn forward_shapes_per_mode() {
        let layout = ChannelLayout::new(1, vec![vec![1, 2], vec![3]]).unwrap();
        let mut label = LabelMap::filled(32, 32, 0);
        for y in 4..12 {
            for x in 4..12 {
                label.set(y, x, 1);
            }
        }
        let props = oracle_proposals(&label, 4).unwrap();
        let img = RgbImage::filled(32, 32, [0.3, 0.6, 0.9]);
        for (mode, se, dense, proto) in [
            (FusionMode::Ending, true, 112, 128),
            (FusionMode::Ending, false, 112, 112),
            (FusionMode::Nfp, true, 112, 128),
            (FusionMode::F4Only, true, 64, 64),
        ] {
            let mut reg = ParameterRegistry::new(DType::F32, Device::Cpu);
            let mut rng = seed::rng(&[0]);
            let model = EndingModel::new(toy_spec(mode, se), layout.clone(), &mut reg, &mut rng).unwrap();
            model.heads.add_head(&mut reg, &mut rng, 1).unwrap();
            let x = images_to_tensor(&[&img, &img], DType::F32, &Device::Cpu).unwrap();
            let out = model.forward(&reg, &x, &[&props, &props], 1).unwrap();
            assert_eq!(out.fusion.f_out.dim(1).unwrap(), dense);
            assert_eq!(out.prototypes.p_out.dims(), &[2, 4, proto]);
            assert_eq!(out.y1.dims(), &[2, 4, 32, 32]);
            assert_eq!(out.y2.y2.dims(), &[2, 4, 32, 32]);
            let pred = model.predict(&reg, &x, &[&props, &props], 1).unwrap();
            assert!(pred[0].iter().all(|&c| c <= 2));
        }
    }
}
