//! Four-level convolutional feature extractor with a dilated context block
//! on top of the deepest stage.

use candle_core::{Tensor, D};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::{Group, ParameterRegistry};
use crate::tensor_ops::{conv2d, group_count, group_norm, uniform};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScalePreset {
    Toy,
    Full,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub channel_dims: [usize; 4],
    pub strides: [usize; 4],
}

impl BackboneConfig {
    pub fn preset(preset: ScalePreset) -> Self {
        match preset {
            ScalePreset::Toy => Self { channel_dims: [32, 64, 128, 64], strides: [2, 4, 8, 8] },
            ScalePreset::Full => Self { channel_dims: [256, 512, 1024, 256], strides: [4, 8, 16, 16] },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let [s1, s2, s3, s4] = self.strides;
        if self.channel_dims.iter().any(|&c| c == 0) {
            return Err(Error::config("backbone channel dims must be positive"));
        }
        if !(s1 <= s2 && s2 <= s3) || s4 != s3 {
            return Err(Error::config("backbone strides must satisfy s1 <= s2 <= s3 = s4"));
        }
        let mut prev = 1;
        for s in [s1, s2, s3] {
            if s % prev != 0 || !(s / prev).is_power_of_two() {
                return Err(Error::config("each stage must downsample by a power of two"));
            }
            prev = s;
        }
        Ok(())
    }

    /// `(channels, height, width)` of f1..f4 for an `h` x `w` input.
    pub fn pyramid_shapes(&self, h: usize, w: usize) -> Result<[(usize, usize, usize); 4]> {
        let deepest = self.strides[2];
        if h % deepest != 0 || w % deepest != 0 {
            return Err(Error::shape(format!("input {h}x{w} not divisible by stride {deepest}")));
        }
        Ok(std::array::from_fn(|i| (self.channel_dims[i], h / self.strides[i], w / self.strides[i])))
    }
}

/// f1..f4, each `(B, C_i, H / s_i, W / s_i)`.
#[derive(Clone, Debug)]
pub struct FeaturePyramid {
    pub f1: Tensor,
    pub f2: Tensor,
    pub f3: Tensor,
    pub f4: Tensor,
}

impl FeaturePyramid {
    /// Low-level feature by 1-based level index.
    pub fn level(&self, i: usize) -> &Tensor {
        match i {
            1 => &self.f1,
            2 => &self.f2,
            3 => &self.f3,
            _ => &self.f4,
        }
    }
}

#[derive(Clone, Debug)]
struct ConvUnit {
    name: String,
    out_c: usize,
    stride: usize,
    padding: usize,
    dilation: usize,
    norm: bool,
}

impl ConvUnit {
    #[allow(clippy::too_many_arguments)]
    fn register(
        reg: &mut ParameterRegistry,
        rng: &mut impl Rng,
        name: String,
        in_c: usize,
        out_c: usize,
        kernel: usize,
        stride: usize,
        dilation: usize,
        norm: bool,
    ) -> Result<Self> {
        let (dt, dev) = (reg.dtype(), reg.device().clone());
        let fan_in = in_c * kernel * kernel;
        let bound = (6.0 / fan_in as f64).sqrt();
        reg.add(Group::Backbone, &format!("{name}.weight"), uniform(&[out_c, in_c, kernel, kernel], bound, rng, dt, &dev)?)?;
        if norm {
            reg.add(Group::Backbone, &format!("{name}.gamma"), Tensor::ones(out_c, dt, &dev)?)?;
            reg.add(Group::Backbone, &format!("{name}.beta"), Tensor::zeros(out_c, dt, &dev)?)?;
        } else {
            reg.add(Group::Backbone, &format!("{name}.bias"), Tensor::zeros(out_c, dt, &dev)?)?;
        }
        Ok(Self { name, out_c, stride, padding: dilation * (kernel / 2), dilation, norm })
    }

    fn forward(&self, reg: &ParameterRegistry, x: &Tensor) -> Result<Tensor> {
        let w = reg.get(&format!("backbone.{}.weight", self.name))?;
        let y = conv2d(x, &w, self.padding, self.stride, self.dilation)?;
        let y = if self.norm {
            let gamma = reg.get(&format!("backbone.{}.gamma", self.name))?;
            let beta = reg.get(&format!("backbone.{}.beta", self.name))?;
            group_norm(&y, group_count(self.out_c), &gamma, &beta)?
        } else {
            let b = reg.get(&format!("backbone.{}.bias", self.name))?;
            y.broadcast_add(&b.reshape((1, self.out_c, 1, 1))?)?
        };
        Ok(y.relu()?)
    }
}

/// Conv stages 1-3 give f1..f3, a fourth stride-1 stage feeds the context
/// block whose output is f4. The context block runs a 1x1 branch, a
/// dilated 3x3 branch and a global-pooling branch in parallel and projects
/// their concatenation to C4 channels.
#[derive(Clone, Debug)]
pub struct Backbone {
    config: BackboneConfig,
    stages: Vec<Vec<ConvUnit>>,
    ctx_point: ConvUnit,
    ctx_dilated: ConvUnit,
    ctx_pool: ConvUnit,
    ctx_project: ConvUnit,
}

impl Backbone {
    pub fn new(config: BackboneConfig, reg: &mut ParameterRegistry, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let [c1, c2, c3, c4] = config.channel_dims;
        let mut stages = Vec::new();
        let mut in_c = 3;
        let mut prev_stride = 1;
        for (i, (&out_c, &stride)) in [c1, c2, c3].iter().zip(&config.strides[..3]).enumerate() {
            let mut units = Vec::new();
            let mut factor = stride / prev_stride;
            let mut k = 0;
            loop {
                let s = if factor > 1 { 2 } else { 1 };
                units.push(ConvUnit::register(reg, rng, format!("stage{}.conv{k}", i + 1), in_c, out_c, 3, s, 1, true)?);
                in_c = out_c;
                k += 1;
                factor /= s;
                if factor == 1 {
                    break;
                }
            }
            stages.push(units);
            prev_stride = stride;
        }
        stages.push(vec![ConvUnit::register(reg, rng, "stage4.conv0".into(), c3, c3, 3, 1, 1, true)?]);
        let ctx_point = ConvUnit::register(reg, rng, "context.point".into(), c3, c4, 1, 1, 1, true)?;
        let ctx_dilated = ConvUnit::register(reg, rng, "context.dilated".into(), c3, c4, 3, 1, 2, true)?;
        let ctx_pool = ConvUnit::register(reg, rng, "context.pool".into(), c3, c4, 1, 1, 1, false)?;
        let ctx_project = ConvUnit::register(reg, rng, "context.project".into(), 3 * c4, c4, 1, 1, 1, true)?;
        Ok(Self { config, stages, ctx_point, ctx_dilated, ctx_pool, ctx_project })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    /// `images`: `(B, 3, H, W)` with H, W divisible by the deepest stride.
    pub fn extract_features(&self, reg: &ParameterRegistry, images: &Tensor) -> Result<FeaturePyramid> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::shape(format!("expected 3 input channels, got {c}")));
        }
        self.config.pyramid_shapes(h, w)?;
        let mut x = images.clone();
        let mut levels = Vec::new();
        for stage in &self.stages {
            for unit in stage {
                x = unit.forward(reg, &x)?;
            }
            levels.push(x.clone());
        }
        let (_, _, gh, gw) = x.dims4()?;
        let pooled = x.mean_keepdim(D::Minus1)?.mean_keepdim(D::Minus2)?;
        let global = self.ctx_pool.forward(reg, &pooled)?.repeat((1, 1, gh, gw))?;
        let branches = Tensor::cat(&[self.ctx_point.forward(reg, &x)?, self.ctx_dilated.forward(reg, &x)?, global], 1)?;
        let f4 = self.ctx_project.forward(reg, &branches)?;
        let mut it = levels.into_iter();
        Ok(FeaturePyramid { f1: it.next().unwrap(), f2: it.next().unwrap(), f3: it.next().unwrap(), f4 })
    }
}
