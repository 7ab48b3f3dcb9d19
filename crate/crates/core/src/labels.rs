//! Training targets: ground truth for the current classes, pseudo-labels
//! for old classes taken from the previous model, and unknown-cluster
//! targets for proposals nothing else claims.

use std::ops::Range;

use crate::data::ProposalSet;
use crate::error::{Error, Result};
use crate::grid::LabelMap;
use crate::protocol::{BACKGROUND, IGNORE};

/// Channel order `[background, unknown_1..unknown_K, C_1.., C_2.., ...]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ChannelLayout {
    pub unknown: usize,
    /// Classes introduced at each step, up to the current one.
    pub steps: Vec<Vec<u8>>,
}

impl ChannelLayout {
    pub fn new(unknown: usize, steps: Vec<Vec<u8>>) -> Result<Self> {
        if unknown == 0 {
            return Err(Error::config("unknown cluster count K must be at least 1"));
        }
        if steps.is_empty() {
            return Err(Error::config("channel layout needs at least one step"));
        }
        Ok(Self { unknown, steps })
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    /// Layout restricted to the first `step` steps.
    pub fn up_to(&self, step: usize) -> Self {
        Self { unknown: self.unknown, steps: self.steps[..step.min(self.steps.len())].to_vec() }
    }

    /// Output width of the head created at `step` (1-based).
    pub fn head_width(&self, step: usize) -> usize {
        let own = self.steps[step - 1].len();
        if step == 1 {
            1 + self.unknown + own
        } else {
            own
        }
    }

    /// Channel range owned by the head of `step`.
    pub fn head_range(&self, step: usize) -> Range<usize> {
        let start: usize = (1..step).map(|s| self.head_width(s)).sum();
        start..start + self.head_width(step)
    }

    pub fn n_channels(&self) -> usize {
        (1..=self.steps.len()).map(|s| self.head_width(s)).sum()
    }

    pub fn first_class_channel(&self) -> usize {
        1 + self.unknown
    }

    pub fn seen_classes(&self) -> Vec<u8> {
        self.steps.iter().flatten().copied().collect()
    }

    pub fn channel_of(&self, class: u8) -> Option<usize> {
        if class == BACKGROUND {
            return Some(0);
        }
        self.steps.iter().flatten().position(|&c| c == class).map(|i| self.first_class_channel() + i)
    }

    /// Class id predicted by a channel; background and unknown channels
    /// both map to background.
    pub fn class_of(&self, channel: usize) -> u8 {
        if channel < self.first_class_channel() {
            BACKGROUND
        } else {
            self.steps.iter().flatten().nth(channel - self.first_class_channel()).copied().unwrap_or(BACKGROUND)
        }
    }

    pub fn is_unknown(&self, channel: usize) -> bool {
        (1..=self.unknown).contains(&channel)
    }
}

/// Per-pixel probabilities, channel-major `(C, H, W)`.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl ScoreMap {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != channels * height * width {
            return Err(Error::shape(format!("{} scores for {channels}x{height}x{width}", data.len())));
        }
        Ok(Self { channels, height, width, data })
    }

    pub fn score(&self, channel: usize, pixel: usize) -> f32 {
        self.data[channel * self.height * self.width + pixel]
    }
}

/// One target channel per pixel, or none for loss-excluded pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EnhancedLabelMap {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub target: Vec<Option<u16>>,
    /// Pixels whose target came from the previous model.
    pub pseudo_labeled: usize,
}

impl EnhancedLabelMap {
    pub fn valid_mask(&self) -> Vec<u8> {
        self.target.iter().map(|t| u8::from(t.is_some())).collect()
    }

    /// Binary `(C, H, W)` target grid.
    pub fn one_hot(&self) -> Vec<f32> {
        let hw = self.height * self.width;
        let mut out = vec![0f32; self.channels * hw];
        for (p, t) in self.target.iter().enumerate() {
            if let Some(c) = t {
                out[*c as usize * hw + p] = 1.0;
            }
        }
        out
    }
}

/// Builds the targets for one image at `step` (1-based).
///
/// Priority per pixel: a labelled foreground class; otherwise, when the
/// previous model is available, its most confident old class if above
/// `tau`; otherwise background when the previous model ranks background or
/// unknown highest; otherwise the pixel is excluded. `IGNORE` pixels are
/// always excluded.
pub fn generate_enhanced_labels(
    gt: &LabelMap,
    layout: &ChannelLayout,
    step: usize,
    prev_scores: Option<&ScoreMap>,
    tau: f32,
) -> Result<EnhancedLabelMap> {
    if step == 0 || step > layout.num_steps() {
        return Err(Error::contract(format!("step {step} outside the layout's {} steps", layout.num_steps())));
    }
    let here = layout.up_to(step);
    let prev_width = here.up_to(step - 1).n_channels();
    match (step, prev_scores) {
        (1, Some(_)) => return Err(Error::contract("previous-model scores supplied at step 1")),
        (s, None) if s > 1 => return Err(Error::contract(format!("step {s} needs previous-model scores"))),
        (_, Some(s)) if s.channels != prev_width || (s.height, s.width) != gt.dims() => {
            return Err(Error::shape(format!(
                "previous scores {}x{}x{} do not match {}x{}x{}",
                s.channels, s.height, s.width, prev_width, gt.height, gt.width
            )))
        }
        _ => {}
    }
    let first_old = layout.first_class_channel();
    let mut target = Vec::with_capacity(gt.data.len());
    let mut pseudo = 0;
    for (p, &g) in gt.data.iter().enumerate() {
        let t = if g == IGNORE {
            None
        } else if g != BACKGROUND {
            let ch = here
                .channel_of(g)
                .ok_or_else(|| Error::contract(format!("label {g} is not a seen class at step {step}")))?;
            Some(ch as u16)
        } else if let Some(s) = prev_scores {
            let (mut best_old, mut best_old_score) = (first_old, f32::NEG_INFINITY);
            for ch in first_old..prev_width {
                let v = s.score(ch, p);
                if v > best_old_score {
                    best_old = ch;
                    best_old_score = v;
                }
            }
            let best_bg = (0..first_old).map(|ch| s.score(ch, p)).fold(f32::NEG_INFINITY, f32::max);
            if best_old_score > tau {
                pseudo += 1;
                Some(best_old as u16)
            } else if best_bg >= best_old_score {
                Some(0)
            } else {
                None
            }
        } else {
            Some(0)
        };
        target.push(t);
    }
    Ok(EnhancedLabelMap { channels: here.n_channels(), height: gt.height, width: gt.width, target, pseudo_labeled: pseudo })
}

/// Valid proposals whose pixels are less than `threshold` covered by class
/// targets.
pub fn unlabeled_proposals(labels: &EnhancedLabelMap, layout: &ChannelLayout, proposals: &ProposalSet, threshold: f64) -> Vec<usize> {
    let first = layout.first_class_channel() as u16;
    (0..proposals.len())
        .filter(|&j| {
            if !proposals.valid[j] {
                return false;
            }
            let mask = &proposals.masks[j].data;
            let (mut area, mut fg) = (0usize, 0usize);
            for (p, &v) in mask.iter().enumerate() {
                if v != 0 {
                    area += 1;
                    if matches!(labels.target[p], Some(c) if c >= first) {
                        fg += 1;
                    }
                }
            }
            area > 0 && (fg as f64) < threshold * area as f64
        })
        .collect()
}

/// Rewrites background targets under proposal `j` to unknown channel
/// `cluster` (0-based) for each `(j, cluster)` pair.
pub fn apply_unknown_targets(labels: &mut EnhancedLabelMap, proposals: &ProposalSet, assigned: &[(usize, usize)]) {
    for &(j, cluster) in assigned {
        for (p, &v) in proposals.masks[j].data.iter().enumerate() {
            if v != 0 && labels.target[p] == Some(0) {
                labels.target[p] = Some(1 + cluster as u16);
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct UnknownClusterState {
    pub k: usize,
    pub dim: usize,
    pub momentum: f64,
    /// Unit rows; a centroid is seeded from the first prototype it sees.
    pub centroids: Vec<Vec<f64>>,
    pub initialized: Vec<bool>,
}

fn normalize(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl UnknownClusterState {
    pub fn new(k: usize, dim: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::config("unknown cluster count K must be at least 1"));
        }
        Ok(Self { k, dim, momentum: 0.99, centroids: vec![vec![0.0; dim]; k], initialized: vec![false; k] })
    }

    pub fn with_centroids(centroids: Vec<Vec<f64>>) -> Result<Self> {
        let mut s = Self::new(centroids.len(), centroids.first().map_or(0, |c| c.len()))?;
        s.centroids = centroids.iter().map(|c| normalize(c)).collect();
        s.initialized = vec![true; s.k];
        Ok(s)
    }

    /// Nearest initialized centroid by cosine similarity, lowest index on
    /// ties.
    pub fn nearest(&self, unit: &[f64]) -> usize {
        let mut best = (0, f64::NEG_INFINITY);
        for (j, c) in self.centroids.iter().enumerate() {
            if self.initialized[j] {
                let s = dot(unit, c);
                if s > best.1 {
                    best = (j, s);
                }
            }
        }
        best.0
    }
}

/// Assigns each prototype to a cluster and moves the centroids toward the
/// mean of their assigned unit prototypes.
pub fn assign_unknown_clusters(state: &mut UnknownClusterState, prototypes: &[Vec<f64>]) -> Result<Vec<usize>> {
    let mut ids = Vec::with_capacity(prototypes.len());
    let mut sums = vec![vec![0.0; state.dim]; state.k];
    let mut counts = vec![0usize; state.k];
    for proto in prototypes {
        if proto.len() != state.dim {
            return Err(Error::shape(format!("prototype of length {} for {}-dim centroids", proto.len(), state.dim)));
        }
        let unit = normalize(proto);
        let j = match state.initialized.iter().position(|i| !i) {
            Some(free) if unit.iter().any(|&v| v != 0.0) => {
                state.centroids[free] = unit.clone();
                state.initialized[free] = true;
                free
            }
            _ => state.nearest(&unit),
        };
        for (s, u) in sums[j].iter_mut().zip(&unit) {
            *s += u;
        }
        counts[j] += 1;
        ids.push(j);
    }
    for j in 0..state.k {
        if counts[j] == 0 {
            continue;
        }
        let mean: Vec<f64> = sums[j].iter().map(|s| s / counts[j] as f64).collect();
        let moved: Vec<f64> = state.centroids[j]
            .iter()
            .zip(&mean)
            .map(|(c, m)| state.momentum * c + (1.0 - state.momentum) * m)
            .collect();
        let unit = normalize(&moved);
        if unit.iter().any(|&v| v != 0.0) {
            state.centroids[j] = unit;
        }
    }
    Ok(ids)
}
