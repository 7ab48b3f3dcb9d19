//! Evolving fusion: a meta-net turns the pooled high-level feature into
//! per-sample 1x1 filters, one bank per low-level feature. The filtered
//! low-level maps ("knowledge") are concatenated with f4.
//!
//! The static-projection pyramid (`Nfp`) and the f4-only head are kept as
//! ablation baselines.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, FeaturePyramid};
use crate::error::{Error, Result};
use crate::params::{Group, ParameterRegistry};
use crate::tensor_ops::{resize_bilinear, uniform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionMode {
    Ending,
    Nfp,
    F4Only,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FusionConfig {
    pub mode: FusionMode,
    pub bottleneck_r: usize,
    pub mined_channels_m: usize,
    pub layer2_bias: bool,
    /// Low-level features (subset of 1..=3) that receive filters.
    pub levels: Vec<usize>,
}

impl FusionConfig {
    pub fn new(mode: FusionMode, mined_channels_m: usize) -> Self {
        Self { mode, bottleneck_r: 4, mined_channels_m, layer2_bias: false, levels: vec![1, 2, 3] }
    }

    pub fn active_levels(&self) -> &[usize] {
        match self.mode {
            FusionMode::F4Only => &[],
            _ => &self.levels,
        }
    }

    /// Channel count of f_out.
    pub fn out_channels(&self, c4: usize) -> usize {
        c4 + self.active_levels().len() * self.mined_channels_m
    }

    pub fn validate(&self) -> Result<()> {
        if self.bottleneck_r == 0 || self.mined_channels_m == 0 {
            return Err(Error::config("fusion bottleneck_r and mined_channels_m must be positive"));
        }
        let mut sorted = self.levels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted != self.levels || self.levels.iter().any(|l| !(1..=3).contains(l)) {
            return Err(Error::config("fusion levels must be an ascending subset of [1, 2, 3]"));
        }
        Ok(())
    }
}

/// Closed-form parameter count of the meta-net: per level, a biased
/// `C4 -> r` layer and an `r -> C_i * m` layer.
pub fn meta_net_parameter_count(c4: usize, level_channels: &[usize], r: usize, m: usize, layer2_bias: bool) -> usize {
    level_channels
        .iter()
        .map(|&ci| c4 * r + r + r * ci * m + if layer2_bias { ci * m } else { 0 })
        .sum()
}

#[derive(Clone, Debug)]
pub struct MetaNet {
    c4: usize,
    /// (level, C_i)
    level_dims: Vec<(usize, usize)>,
    r: usize,
    m: usize,
    layer2_bias: bool,
}

/// Per-sample filter banks, `(B, m, C_i)` for each active level.
#[derive(Clone, Debug)]
pub struct PersonalizedFilters {
    pub filters: Vec<(usize, Tensor)>,
}

impl MetaNet {
    pub fn new(
        reg: &mut ParameterRegistry,
        rng: &mut impl Rng,
        c4: usize,
        level_dims: Vec<(usize, usize)>,
        r: usize,
        m: usize,
        layer2_bias: bool,
    ) -> Result<Self> {
        let (dt, dev) = (reg.dtype(), reg.device().clone());
        let b1 = (1.0 / c4 as f64).sqrt();
        for &(level, ci) in &level_dims {
            let p = format!("level{level}");
            reg.add(Group::MetaNet, &format!("{p}.fc1.weight"), uniform(&[r, c4], b1, rng, dt, &dev)?)?;
            reg.add(Group::MetaNet, &format!("{p}.fc1.bias"), uniform(&[r], b1, rng, dt, &dev)?)?;
            let b2 = (1.0 / (r * ci) as f64).sqrt();
            reg.add(Group::MetaNet, &format!("{p}.fc2.weight"), uniform(&[ci * m, r], b2, rng, dt, &dev)?)?;
            if layer2_bias {
                reg.add(Group::MetaNet, &format!("{p}.fc2.bias"), uniform(&[ci * m], b2, rng, dt, &dev)?)?;
            }
        }
        Ok(Self { c4, level_dims, r, m, layer2_bias })
    }

    pub fn count_parameters(&self) -> usize {
        let dims: Vec<usize> = self.level_dims.iter().map(|&(_, c)| c).collect();
        meta_net_parameter_count(self.c4, &dims, self.r, self.m, self.layer2_bias)
    }

    /// Global-average-pools f4 and maps it through each sub-net.
    pub fn generate_personalized_filters(&self, reg: &ParameterRegistry, f4: &Tensor) -> Result<PersonalizedFilters> {
        let (b, c, _, _) = f4.dims4()?;
        if c != self.c4 {
            return Err(Error::shape(format!("meta-net expects {} channels in f4, got {c}", self.c4)));
        }
        let pooled = f4.mean(D::Minus1)?.mean(D::Minus1)?; // (B, C4)
        let mut filters = Vec::with_capacity(self.level_dims.len());
        for &(level, ci) in &self.level_dims {
            let p = format!("meta_net.level{level}");
            let w1 = reg.get(&format!("{p}.fc1.weight"))?;
            let b1 = reg.get(&format!("{p}.fc1.bias"))?;
            let hidden = pooled.matmul(&w1.t()?)?.broadcast_add(&b1)?.relu()?;
            let w2 = reg.get(&format!("{p}.fc2.weight"))?;
            let mut out = hidden.matmul(&w2.t()?)?;
            if self.layer2_bias {
                out = out.broadcast_add(&reg.get(&format!("{p}.fc2.bias"))?)?;
            }
            filters.push((level, out.reshape((b, self.m, ci))?));
        }
        Ok(PersonalizedFilters { filters })
    }
}

/// Applies a 1x1 filter bank to `fi` at its native resolution and resizes
/// the result to `grid`. `wi` is `(B, m, C_i)` (one bank per sample) or
/// `(m, C_i)` (shared).
pub fn mine_knowledge(fi: &Tensor, wi: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    let (b, ci, h, w) = fi.dims4()?;
    let (m, wc) = match wi.dims() {
        [wb, m, wc] if *wb == b => (*m, *wc),
        [m, wc] => (*m, *wc),
        other => return Err(Error::shape(format!("filter bank {other:?} for batch {b}"))),
    };
    if wc != ci {
        return Err(Error::shape(format!("filters expect {wc} channels, feature has {ci}")));
    }
    let flat = fi.reshape((b, ci, h * w))?;
    let k = if wi.rank() == 3 { wi.matmul(&flat)? } else { wi.broadcast_matmul(&flat)? };
    resize_bilinear(&k.reshape((b, m, h, w))?, grid.0, grid.1)
}

/// Static projection baseline: same as [`mine_knowledge`] with one learned
/// `(m, C_i)` matrix shared by all inputs.
pub fn nfp_project(fi: &Tensor, projection: &Tensor, grid: (usize, usize)) -> Result<Tensor> {
    if projection.rank() != 2 {
        return Err(Error::shape("projection must be (m, C_i)"));
    }
    mine_knowledge(fi, projection, grid)
}

/// Channel concatenation in the order (f4, k1, k2, k3).
pub fn fuse(f4: &Tensor, knowledge: &[Tensor]) -> Result<Tensor> {
    let (b, _, h, w) = f4.dims4()?;
    for k in knowledge {
        let (kb, _, kh, kw) = k.dims4()?;
        if (kb, kh, kw) != (b, h, w) {
            return Err(Error::shape(format!("knowledge {:?} does not match f4 grid {:?}", k.dims(), f4.dims())));
        }
    }
    let mut parts = vec![f4.clone()];
    parts.extend(knowledge.iter().cloned());
    Ok(Tensor::cat(&parts, 1)?)
}

#[derive(Clone, Debug)]
pub struct FusionOutput {
    /// k_i for each active level, at f4's grid.
    pub knowledge: Vec<Tensor>,
    pub f_out: Tensor,
    pub filters: Option<PersonalizedFilters>,
}

#[derive(Clone, Debug)]
pub struct EvolvingFusion {
    config: FusionConfig,
    meta: Option<MetaNet>,
    c4: usize,
}

impl EvolvingFusion {
    pub fn new(config: FusionConfig, backbone: &BackboneConfig, reg: &mut ParameterRegistry, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let c4 = backbone.channel_dims[3];
        let level_dims: Vec<(usize, usize)> =
            config.active_levels().iter().map(|&l| (l, backbone.channel_dims[l - 1])).collect();
        let meta = match config.mode {
            FusionMode::Ending => Some(MetaNet::new(
                reg,
                rng,
                c4,
                level_dims,
                config.bottleneck_r,
                config.mined_channels_m,
                config.layer2_bias,
            )?),
            FusionMode::Nfp => {
                let (dt, dev) = (reg.dtype(), reg.device().clone());
                for (l, ci) in level_dims {
                    let bound = (1.0 / ci as f64).sqrt();
                    reg.add(
                        Group::MetaNet,
                        &format!("nfp.level{l}.weight"),
                        uniform(&[config.mined_channels_m, ci], bound, rng, dt, &dev)?,
                    )?;
                }
                None
            }
            FusionMode::F4Only => None,
        };
        Ok(Self { config, meta, c4 })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    pub fn meta_net(&self) -> Option<&MetaNet> {
        self.meta.as_ref()
    }

    pub fn out_channels(&self) -> usize {
        self.config.out_channels(self.c4)
    }

    pub fn forward(&self, reg: &ParameterRegistry, pyramid: &FeaturePyramid) -> Result<FusionOutput> {
        let (_, _, h, w) = pyramid.f4.dims4()?;
        let (knowledge, filters) = match self.config.mode {
            FusionMode::Ending => {
                let filters = self.meta.as_ref().expect("ending mode owns a meta-net").generate_personalized_filters(reg, &pyramid.f4)?;
                let ks = filters
                    .filters
                    .iter()
                    .map(|(l, wi)| mine_knowledge(pyramid.level(*l), wi, (h, w)))
                    .collect::<Result<Vec<_>>>()?;
                (ks, Some(filters))
            }
            FusionMode::Nfp => {
                let ks = self
                    .config
                    .levels
                    .iter()
                    .map(|&l| nfp_project(pyramid.level(l), &reg.get(&format!("meta_net.nfp.level{l}.weight"))?, (h, w)))
                    .collect::<Result<Vec<_>>>()?;
                (ks, None)
            }
            FusionMode::F4Only => (Vec::new(), None),
        };
        let f_out = fuse(&pyramid.f4, &knowledge)?;
        Ok(FusionOutput { knowledge, f_out, filters })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::ScalePreset;
    use crate::seed;
    use crate::tensor_ops::to_f64_vec;
    use candle_core::{DType, Device};

    #[test]
    fn closed_form_counts() {
        assert_eq!(meta_net_parameter_count(256, &[256, 512, 1024], 4, 48, false), 347_148);
        assert_eq!(meta_net_parameter_count(256, &[256, 512, 1024], 4, 48, true), 433_164);
        assert_eq!(meta_net_parameter_count(64, &[32, 64, 128], 4, 16, false), 15_116);
    }

    #[test]
    fn registered_count_matches_closed_form() {
        for (preset, m, bias) in [(ScalePreset::Toy, 16, false), (ScalePreset::Full, 48, false), (ScalePreset::Full, 48, true)] {
            let bb = BackboneConfig::preset(preset);
            let mut reg = ParameterRegistry::new(DType::F32, Device::Cpu);
            let mut cfg = FusionConfig::new(FusionMode::Ending, m);
            cfg.layer2_bias = bias;
            let f = EvolvingFusion::new(cfg, &bb, &mut reg, &mut seed::rng(&[0])).unwrap();
            assert_eq!(reg.n_params(Group::MetaNet), f.meta_net().unwrap().count_parameters());
        }
    }

    fn toy_meta() -> (MetaNet, ParameterRegistry) {
        let mut reg = ParameterRegistry::new(DType::F64, Device::Cpu);
        let meta = MetaNet::new(&mut reg, &mut seed::rng(&[3]), 8, vec![(1, 4), (2, 6), (3, 8)], 4, 3, false).unwrap();
        (meta, reg)
    }

    #[test]
    fn filter_shapes_and_determinism() {
        let (meta, reg) = toy_meta();
        let one = Tensor::randn(0f64, 1., (1, 8, 2, 2), &Device::Cpu).unwrap();
        let f4 = Tensor::cat(&[one.clone(), one], 0).unwrap();
        let pf = meta.generate_personalized_filters(&reg, &f4).unwrap();
        assert_eq!(pf.filters[0].1.dims(), &[2, 3, 4]);
        assert_eq!(pf.filters[2].1.dims(), &[2, 3, 8]);
        let w = &pf.filters[1].1;
        let a = to_f64_vec(&w.get(0).unwrap()).unwrap();
        let b = to_f64_vec(&w.get(1).unwrap()).unwrap();
        assert_eq!(a, b);
        let bad = Tensor::zeros((1, 7, 2, 2), DType::F64, &Device::Cpu).unwrap();
        assert!(meta.generate_personalized_filters(&reg, &bad).is_err());
    }

    #[test]
    fn distinct_inputs_give_distinct_filters() {
        let (meta, reg) = toy_meta();
        let f4 = Tensor::randn(0f64, 1., (2, 8, 3, 3), &Device::Cpu).unwrap().abs().unwrap();
        let pf = meta.generate_personalized_filters(&reg, &f4).unwrap();
        let w = &pf.filters[0].1;
        let diff = (w.get(0).unwrap() - w.get(1).unwrap()).unwrap().abs().unwrap().max_all().unwrap();
        assert!(diff.to_scalar::<f64>().unwrap() > 0.0);
    }

    #[test]
    fn mine_knowledge_matches_per_pixel_products() {
        let dev = Device::Cpu;
        let fi = Tensor::randn(0f64, 1., (1, 2, 2, 2), &dev).unwrap();
        let wi = Tensor::randn(0f64, 1., (1, 3, 2), &dev).unwrap();
        let k = to_f64_vec(&mine_knowledge(&fi, &wi, (2, 2)).unwrap()).unwrap();
        let f = to_f64_vec(&fi).unwrap();
        let w = to_f64_vec(&wi).unwrap();
        for c in 0..3 {
            for p in 0..4 {
                let expect: f64 = (0..2).map(|j| w[c * 2 + j] * f[j * 4 + p]).sum();
                assert!((k[c * 4 + p] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_and_zero_filters() {
        let dev = Device::Cpu;
        let fi = Tensor::randn(0f64, 1., (2, 3, 4, 4), &dev).unwrap();
        let sel = Tensor::from_vec(vec![0f64, 0., 1., 1., 0., 0.], (2, 3), &dev).unwrap();
        let k = mine_knowledge(&fi, &sel, (4, 4)).unwrap();
        let expect = Tensor::cat(&[fi.narrow(1, 2, 1).unwrap(), fi.narrow(1, 0, 1).unwrap()], 1).unwrap();
        assert_eq!(to_f64_vec(&k).unwrap(), to_f64_vec(&expect).unwrap());
        let z = nfp_project(&fi, &Tensor::zeros((5, 3), DType::F64, &dev).unwrap(), (2, 2)).unwrap();
        assert_eq!(z.dims(), &[2, 5, 2, 2]);
        assert!(to_f64_vec(&z).unwrap().iter().all(|&v| v == 0.0));
        assert!(mine_knowledge(&fi, &Tensor::zeros((5, 4), DType::F64, &dev).unwrap(), (2, 2)).is_err());
    }

    #[test]
    fn fuse_channels_and_prefix() {
        let dev = Device::Cpu;
        for (preset, m, expect) in [(ScalePreset::Full, 48, 400), (ScalePreset::Toy, 16, 112)] {
            let cfg = FusionConfig::new(FusionMode::Ending, m);
            assert_eq!(cfg.out_channels(BackboneConfig::preset(preset).channel_dims[3]), expect);
        }
        let f4 = Tensor::randn(0f64, 1., (1, 4, 2, 2), &dev).unwrap();
        let k = Tensor::randn(0f64, 1., (1, 3, 2, 2), &dev).unwrap();
        let out = fuse(&f4, &[k.clone(), k.clone(), k]).unwrap();
        assert_eq!(out.dims(), &[1, 13, 2, 2]);
        assert_eq!(to_f64_vec(&out.narrow(1, 0, 4).unwrap()).unwrap(), to_f64_vec(&f4).unwrap());
        let off = Tensor::zeros((1, 3, 3, 2), DType::F64, &dev).unwrap();
        assert!(fuse(&f4, &[off]).is_err());
    }

    #[test]
    fn level_subsets_validate() {
        let mut cfg = FusionConfig::new(FusionMode::Nfp, 4);
        cfg.levels = vec![1, 3];
        cfg.validate().unwrap();
        assert_eq!(cfg.out_channels(8), 16);
        cfg.levels = vec![3, 1];
        assert!(cfg.validate().is_err());
        cfg.levels = vec![4];
        assert!(cfg.validate().is_err());
    }
}
