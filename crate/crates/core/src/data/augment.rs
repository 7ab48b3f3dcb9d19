use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{LabeledImage, ProposalSet, Sample};
use crate::grid::Mask;
use crate::protocol::BACKGROUND;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentConfig {
    pub crop_size: usize,
    #[serde(default = "default_scale_min")]
    pub scale_min: f64,
    #[serde(default = "default_scale_max")]
    pub scale_max: f64,
    #[serde(default = "default_flip_prob")]
    pub flip_prob: f64,
}

fn default_scale_min() -> f64 {
    0.5
}
fn default_scale_max() -> f64 {
    2.0
}
fn default_flip_prob() -> f64 {
    0.5
}

impl AugmentConfig {
    pub fn with_crop(crop_size: usize) -> Self {
        Self { crop_size, scale_min: 0.5, scale_max: 2.0, flip_prob: 0.5 }
    }
}

/// One geometric transform: rescale, optional mirror, then a
/// `crop`x`crop` window at (top, left) of the rescaled grid.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Transform {
    pub scale: f64,
    pub flip: bool,
    pub top: usize,
    pub left: usize,
    pub crop: usize,
}

impl Transform {
    pub fn identity(crop: usize) -> Self {
        Self { scale: 1.0, flip: false, top: 0, left: 0, crop }
    }

    pub fn sample(cfg: &AugmentConfig, height: usize, width: usize, rng: &mut impl Rng) -> Self {
        let scale = rng.gen_range(cfg.scale_min..=cfg.scale_max);
        let flip = rng.gen::<f64>() < cfg.flip_prob;
        let (sh, sw) = scaled_dims(height, width, scale);
        let top = if sh > cfg.crop_size { rng.gen_range(0..=sh - cfg.crop_size) } else { 0 };
        let left = if sw > cfg.crop_size { rng.gen_range(0..=sw - cfg.crop_size) } else { 0 };
        Self { scale, flip, top, left, crop: cfg.crop_size }
    }

    /// Applies the same geometry to image (bilinear), label and every
    /// proposal mask (nearest). Padding is background / zero.
    pub fn apply(&self, sample: &Sample) -> Sample {
        let LabeledImage { image_id, image, label } = &sample.image;
        let (sh, sw) = scaled_dims(image.height, image.width, self.scale);
        let mut img = if (sh, sw) == image.dims() { image.clone() } else { image.resize_bilinear(sh, sw) };
        let mut lab = label.resize_nearest(sh, sw);
        if self.flip {
            img = img.flip_horizontal();
            lab = lab.flip_horizontal();
        }
        let c = self.crop;
        let img = img.crop_or_pad(self.top, self.left, c, c, [0.0; 3]);
        let lab = lab.crop_or_pad(self.top, self.left, c, c, BACKGROUND);
        let masks = sample
            .proposals
            .masks
            .iter()
            .zip(&sample.proposals.valid)
            .map(|(m, &valid)| {
                if !valid {
                    return Mask::filled(c, c, 0);
                }
                let mut m = m.resize_nearest(sh, sw);
                if self.flip {
                    m = m.flip_horizontal();
                }
                m.crop_or_pad(self.top, self.left, c, c, 0)
            })
            .collect();
        Sample {
            image: LabeledImage { image_id: image_id.clone(), image: img, label: lab },
            proposals: ProposalSet { height: c, width: c, masks, valid: sample.proposals.valid.clone() },
        }
    }
}

fn scaled_dims(h: usize, w: usize, scale: f64) -> (usize, usize) {
    (((h as f64 * scale).round() as usize).max(1), ((w as f64 * scale).round() as usize).max(1))
}

/// Random scale in `[scale_min, scale_max]`, mirror with `flip_prob`,
/// random crop (or bottom/right padding) to `crop_size`.
pub fn augment(sample: &Sample, cfg: &AugmentConfig, rng: &mut impl Rng) -> Sample {
    let (h, w) = sample.image.image.dims();
    Transform::sample(cfg, h, w, rng).apply(sample)
}
