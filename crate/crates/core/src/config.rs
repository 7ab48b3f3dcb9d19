//! Run configuration: JSON schema, dotted-path overrides, preset
//! resolution and validation.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::backbone::{BackboneConfig, ScalePreset};
use crate::error::{Error, Result};
use crate::fusion::{FusionConfig, FusionMode};
use crate::model::ModelSpec;
use crate::protocol::SetupMode;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Synthetic,
    Voc,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub kind: DatasetKind,
    /// VOC-layout root (kind = voc).
    pub path: Option<String>,
    pub seed: u64,
    pub train_images: usize,
    pub val_images: usize,
    pub image_size: usize,
    /// Training crop; `null` means the image size.
    pub crop_size: Option<usize>,
    pub augment: bool,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            kind: DatasetKind::Synthetic,
            path: None,
            seed: 7,
            train_images: 200,
            val_images: 60,
            image_size: 64,
            crop_size: None,
            augment: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskSection {
    pub split: String,
    pub mode: SetupMode,
    pub total_classes: u8,
}

impl Default for TaskSection {
    fn default() -> Self {
        Self { split: "4-2".into(), mode: SetupMode::Overlapped, total_classes: 8 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub scale: ScalePreset,
    pub fusion_mode: FusionMode,
    pub semantic_enhancement: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self { scale: ScalePreset::Toy, fusion_mode: FusionMode::Ending, semantic_enhancement: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FusionSection {
    pub bottleneck_r: usize,
    /// `null`: 48 at full scale, 16 at toy scale.
    pub mined_channels_m: Option<usize>,
    pub layer2_bias: bool,
    pub levels: Vec<usize>,
}

impl Default for FusionSection {
    fn default() -> Self {
        Self { bottleneck_r: 4, mined_channels_m: None, layer2_bias: false, levels: vec![1, 2, 3] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SemanticSection {
    pub hidden_dim: Option<usize>,
    pub blend_dim: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LabelsSection {
    pub tau: f32,
    /// Unknown clusters; `null`: 5 at full scale, 1 at toy scale.
    #[serde(rename = "K")]
    pub k: Option<usize>,
    pub unlabeled_overlap_threshold: f64,
}

impl Default for LabelsSection {
    fn default() -> Self {
        Self { tau: 0.7, k: None, unlabeled_overlap_threshold: 0.5 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReplaySection {
    pub enabled: bool,
    pub capacity: usize,
}

impl Default for ReplaySection {
    fn default() -> Self {
        Self { enabled: false, capacity: 100 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub lr0_step1: f64,
    pub lr0_later: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs_per_step: usize,
    pub batch_size: usize,
    pub poly_power: f64,
    pub seed: Option<u64>,
    pub replay: ReplaySection,
    pub precision: Precision,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            // later steps only fit a linear head whose loss is averaged over
            // every channel, so the toy schedule drives it hard
            lr0_step1: 5e-2,
            lr0_later: 2.0,
            momentum: 0.9,
            weight_decay: 1e-4,
            epochs_per_step: 10,
            batch_size: 8,
            poly_power: 0.9,
            seed: None,
            replay: ReplaySection::default(),
            precision: Precision::F32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub root: String,
    pub run_name: String,
    pub formats: Vec<crate::eval::ReportFormat>,
}

impl Default for OutputSection {
    fn default() -> Self {
        use crate::eval::ReportFormat::*;
        Self { root: "runs".into(), run_name: "toy".into(), formats: vec![Table, Json, Plot] }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DebugSection {
    /// Perturbs a frozen parameter just before the end-of-step check of
    /// this step (exercises the drift guard).
    pub inject_frozen_drift_step: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub dataset: DatasetSection,
    pub task: TaskSection,
    pub model: ModelSection,
    pub fusion: FusionSection,
    pub semantic: SemanticSection,
    pub labels: LabelsSection,
    pub train: TrainSection,
    pub output: OutputSection,
    pub debug: DebugSection,
    /// Every `--override` applied so far, verbatim.
    pub applied_overrides: Vec<String>,
}

/// Collects dotted paths present in `value` but not in `schema`.
fn unknown_keys(value: &Value, schema: &Value, prefix: &str, out: &mut Vec<String>) {
    if let (Value::Object(v), Value::Object(s)) = (value, schema) {
        for (k, child) in v {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match s.get(k) {
                Some(sub) => unknown_keys(child, sub, &path, out),
                None => out.push(path),
            }
        }
    }
}

fn parse_scalar(raw: &str) -> Value {
    serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()))
}

/// Sets `path` (dot separated) in a JSON tree, creating objects on the way.
pub fn set_path(root: &mut Value, path: &str, value: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = path.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::config(format!("malformed override path '{path}'")));
    }
    for part in &parts[..parts.len() - 1] {
        if !cur.is_object() {
            return Err(Error::config(format!("override path '{path}' crosses a non-object value")));
        }
        cur = cur.as_object_mut().expect("checked").entry(part.to_string()).or_insert_with(|| Value::Object(Default::default()));
    }
    match cur.as_object_mut() {
        Some(obj) => {
            obj.insert(parts[parts.len() - 1].to_string(), value);
            Ok(())
        }
        None => Err(Error::config(format!("override path '{path}' crosses a non-object value"))),
    }
}

impl RunConfig {
    /// Parses JSON text, applies `key=value` overrides and validates,
    /// reporting every problem at once.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self> {
        let mut value: Value = serde_json::from_str(text).map_err(|e| Error::config(format!("config is not valid JSON: {e}")))?;
        if !value.is_object() {
            return Err(Error::config("config root must be a JSON object"));
        }
        let mut recorded: Vec<String> = match value.get("applied_overrides") {
            Some(Value::Array(a)) => a.iter().filter_map(|v| v.as_str().map(str::to_string)).collect(),
            _ => Vec::new(),
        };
        let mut problems = Vec::new();
        for ov in overrides {
            match ov.split_once('=') {
                Some((k, v)) => {
                    if let Err(e) = set_path(&mut value, k.trim(), parse_scalar(v.trim())) {
                        problems.push(e.to_string());
                    }
                    recorded.push(ov.clone());
                }
                None => problems.push(format!("override '{ov}' is not key=value")),
            }
        }
        let schema = serde_json::to_value(RunConfig::default())?;
        let mut unknown = Vec::new();
        unknown_keys(&value, &schema, "", &mut unknown);
        problems.extend(unknown.into_iter().map(|k| format!("unknown key '{k}'")));
        if !problems.is_empty() {
            return Err(Error::Config(problems.join("; ")));
        }
        let mut cfg: RunConfig = serde_json::from_value(value).map_err(|e| Error::config(format!("invalid config: {e}")))?;
        cfg.applied_overrides = recorded;
        cfg.resolve();
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_json(&text, overrides)
    }

    /// Fills preset-dependent defaults so the resolved config is explicit.
    pub fn resolve(&mut self) {
        let full = self.model.scale == ScalePreset::Full;
        let m = *self.fusion.mined_channels_m.get_or_insert(if full { 48 } else { 16 });
        self.semantic.hidden_dim.get_or_insert(m);
        self.semantic.blend_dim.get_or_insert(m);
        self.labels.k.get_or_insert(if full { 5 } else { 1 });
        self.dataset.crop_size.get_or_insert(self.dataset.image_size);
    }

    /// Every violated constraint, joined into one config error.
    pub fn validate(&self) -> Result<()> {
        let mut p: Vec<String> = Vec::new();
        let mut need = |ok: bool, msg: &str| {
            if !ok {
                p.push(msg.to_string());
            }
        };
        let d = &self.dataset;
        need(d.kind != DatasetKind::Voc || d.path.is_some(), "dataset.path is required for kind=voc");
        need(d.kind != DatasetKind::Synthetic || d.train_images > 0, "dataset.train_images must be positive");
        need(d.kind != DatasetKind::Synthetic || d.val_images > 0, "dataset.val_images must be positive");
        need(d.image_size >= 32, "dataset.image_size must be at least 32");
        need(d.crop_size.map_or(true, |c| c >= 16), "dataset.crop_size must be at least 16");
        let stride = BackboneConfig::preset(self.model.scale).strides[3];
        need(d.crop_size.map_or(true, |c| c % stride == 0), "dataset.crop_size must be divisible by the backbone output stride");
        need(d.kind != DatasetKind::Synthetic || d.image_size % stride == 0, "dataset.image_size must be divisible by the backbone output stride");
        need((2..=25).contains(&self.task.total_classes) || d.kind == DatasetKind::Voc, "task.total_classes must be in 2..=25 for synthetic data");
        if let Err(e) = crate::protocol::build_task(&self.task.split, self.task.total_classes, self.task.mode) {
            need(false, &format!("task.split: {e}"));
        }
        let f = &self.fusion;
        need(f.bottleneck_r > 0, "fusion.bottleneck_r must be positive");
        need(f.mined_channels_m.map_or(true, |m| m > 0), "fusion.mined_channels_m must be positive");
        let mut lv = f.levels.clone();
        lv.sort_unstable();
        lv.dedup();
        need(lv == f.levels && f.levels.iter().all(|l| (1..=3).contains(l)), "fusion.levels must be an ascending subset of [1, 2, 3]");
        need(self.semantic.hidden_dim.map_or(true, |v| v > 0), "semantic.hidden_dim must be positive");
        need(self.semantic.blend_dim.map_or(true, |v| v > 0), "semantic.blend_dim must be positive");
        need((0.0..=1.0).contains(&self.labels.tau), "labels.tau must be in [0, 1]");
        need(self.labels.k.map_or(true, |k| k >= 1), "labels.K must be at least 1");
        need(
            self.labels.unlabeled_overlap_threshold > 0.0 && self.labels.unlabeled_overlap_threshold <= 1.0,
            "labels.unlabeled_overlap_threshold must be in (0, 1]",
        );
        let t = &self.train;
        need(t.lr0_step1 > 0.0 && t.lr0_later > 0.0, "train learning rates must be positive");
        need((0.0..1.0).contains(&t.momentum), "train.momentum must be in [0, 1)");
        need(t.weight_decay >= 0.0, "train.weight_decay must be non-negative");
        need(t.epochs_per_step > 0, "train.epochs_per_step must be positive");
        need(t.batch_size > 0, "train.batch_size must be positive");
        need(t.poly_power > 0.0, "train.poly_power must be positive");
        need(t.seed.is_some(), "train.seed is required");
        need(!t.replay.enabled || t.replay.capacity > 0, "train.replay.capacity must be positive when replay is enabled");
        need(!self.output.run_name.is_empty() && !self.output.run_name.contains(['/', '\\']), "output.run_name must be a plain name");
        need(self.debug.inject_frozen_drift_step.map_or(true, |s| s >= 2), "debug.inject_frozen_drift_step must be at least 2");
        if p.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(p.join("; ")))
        }
    }

    pub fn seed(&self) -> u64 {
        self.train.seed.unwrap_or(0)
    }

    pub fn model_spec(&self) -> ModelSpec {
        let m = self.fusion.mined_channels_m.unwrap_or(16);
        let mut fusion = FusionConfig::new(self.model.fusion_mode, m);
        fusion.bottleneck_r = self.fusion.bottleneck_r;
        fusion.layer2_bias = self.fusion.layer2_bias;
        fusion.levels = self.fusion.levels.clone();
        ModelSpec {
            backbone: BackboneConfig::preset(self.model.scale),
            fusion,
            semantic_enhancement: self.model.semantic_enhancement,
            hidden_dim: self.semantic.hidden_dim.unwrap_or(m),
            blend_dim: self.semantic.blend_dim.unwrap_or(m),
        }
    }

    /// Toy preset with a seed, ready to run.
    pub fn toy(seed: u64) -> Self {
        let mut c = Self::default();
        c.train.seed = Some(seed);
        c.resolve();
        c
    }

    /// Full-scale preset: 512 px crops, batch 16, 50 epochs per step.
    pub fn full(seed: u64) -> Self {
        let mut c = Self::default();
        c.model.scale = ScalePreset::Full;
        c.dataset.image_size = 512;
        c.task = TaskSection { split: "15-5".into(), mode: SetupMode::Overlapped, total_classes: 20 };
        c.train.batch_size = 16;
        c.train.epochs_per_step = 50;
        c.train.lr0_step1 = 1e-2;
        c.train.lr0_later = 1e-3;
        c.train.seed = Some(seed);
        c.output.run_name = "full".into();
        c.resolve();
        c
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_resolve_per_scale() {
        let toy = RunConfig::toy(1);
        assert_eq!(toy.fusion.mined_channels_m, Some(16));
        assert_eq!(toy.labels.k, Some(1));
        toy.validate().unwrap();
        let full = RunConfig::full(1);
        assert_eq!(full.fusion.mined_channels_m, Some(48));
        assert_eq!(full.labels.k, Some(5));
        assert_eq!(full.semantic.blend_dim, Some(48));
        full.validate().unwrap();
    }

    #[test]
    fn overrides_apply_and_are_recorded() {
        let cfg = RunConfig::from_json(
            r#"{"train": {"seed": 3}}"#,
            &["model.fusion_mode=f4_only".into(), "train.replay.enabled=true".into(), "fusion.levels=[1,3]".into()],
        )
        .unwrap();
        assert_eq!(cfg.model.fusion_mode, FusionMode::F4Only);
        assert!(cfg.train.replay.enabled);
        assert_eq!(cfg.fusion.levels, vec![1, 3]);
        assert_eq!(cfg.applied_overrides.len(), 3);
        let echoed = serde_json::to_string(&cfg).unwrap();
        assert_eq!(RunConfig::from_json(&echoed, &[]).unwrap(), cfg);
    }

    #[test]
    fn unknown_keys_and_violations_are_all_listed() {
        let err = RunConfig::from_json(r#"{"train": {"seed": 1, "lr": 3}, "bogus": 1}"#, &["model.nope=2".into()]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("train.lr") && msg.contains("bogus") && msg.contains("model.nope"), "{msg}");
        let err = RunConfig::from_json(r#"{"train": {"batch_size": 0, "momentum": 1.5}}"#, &[]).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("batch_size") && msg.contains("momentum") && msg.contains("seed"), "{msg}");
        assert!(matches!(RunConfig::from_json("[1]", &[]), Err(Error::Config(_))));
    }
}
