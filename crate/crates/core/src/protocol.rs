//! Incremental curricula: class splits, per-step image pools and the
//! label remapping that produces background shift.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::grid::LabelMap;

pub const BACKGROUND: u8 = 0;
/// Label value excluded from training and evaluation (VOC boundary pixels).
pub const IGNORE: u8 = 255;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SetupMode {
    #[default]
    Overlapped,
    Disjoint,
}

/// Serialized form of a task: `{"split": "15-5", "mode": "overlapped", "total_fg_classes": 20}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskDoc {
    pub split: String,
    #[serde(default)]
    pub mode: SetupMode,
    pub total_fg_classes: u8,
}

/// An ordered sequence of disjoint class groups. Steps are 1-based in the
/// public API.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TaskDoc", into = "TaskDoc")]
pub struct TaskSpec {
    pub split: String,
    pub total_fg_classes: u8,
    pub steps: Vec<Vec<u8>>,
    pub setup_mode: SetupMode,
}

impl TryFrom<TaskDoc> for TaskSpec {
    type Error = Error;

    fn try_from(doc: TaskDoc) -> Result<Self> {
        build_task(&doc.split, doc.total_fg_classes, doc.mode)
    }
}

impl From<TaskSpec> for TaskDoc {
    fn from(task: TaskSpec) -> Self {
        TaskDoc { split: task.split, mode: task.setup_mode, total_fg_classes: task.total_fg_classes }
    }
}

/// What the learner sees at one step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepView {
    pub step_index: usize,
    pub current_classes: Vec<u8>,
    pub seen_classes: Vec<u8>,
    pub image_ids: Vec<String>,
}

/// Parses a `"B-S"` split code into `1 + (total - B) / S` steps over
/// ascending class ids.
pub fn build_task(split_code: &str, total_fg_classes: u8, setup_mode: SetupMode) -> Result<TaskSpec> {
    let bad = |reason: &str| Error::MalformedSplit { code: split_code.to_string(), reason: reason.to_string() };
    let (b, s) = split_code.trim().split_once('-').ok_or_else(|| bad("expected \"B-S\""))?;
    let base: i64 = b.trim().parse().map_err(|_| bad("base is not an integer"))?;
    let stride: i64 = s.trim().parse().map_err(|_| bad("step size is not an integer"))?;
    if base <= 0 || stride <= 0 {
        return Err(bad("base and step size must be positive"));
    }
    let total = total_fg_classes as i64;
    let rest = total - base;
    if rest < stride || rest % stride != 0 {
        return Err(bad(&format!("{total} classes do not split as {base} + k*{stride} with k >= 1")));
    }
    let mut steps = vec![(1..=base as u8).collect::<Vec<_>>()];
    let mut next = base + 1;
    while next <= total {
        steps.push((next as u8..=(next + stride - 1) as u8).collect());
        next += stride;
    }
    Ok(TaskSpec { split: split_code.trim().to_string(), total_fg_classes, steps, setup_mode })
}

impl TaskSpec {
    /// Builds a task from explicit class groups (used for single-step and
    /// custom curricula that have no `"B-S"` code).
    pub fn from_steps(total_fg_classes: u8, steps: Vec<Vec<u8>>, setup_mode: SetupMode) -> Result<Self> {
        let task = TaskSpec { split: "custom".into(), total_fg_classes, steps, setup_mode };
        task.validate()?;
        Ok(task)
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::config("task needs at least one step"));
        }
        let mut all: Vec<u8> = self.steps.iter().flatten().copied().collect();
        if self.steps.iter().any(|s| s.is_empty()) {
            return Err(Error::config("every step needs at least one class"));
        }
        all.sort_unstable();
        let expected: Vec<u8> = (1..=self.total_fg_classes).collect();
        if all != expected {
            return Err(Error::config(format!(
                "step classes must partition 1..={}",
                self.total_fg_classes
            )));
        }
        Ok(())
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    fn check_step(&self, step: usize) -> Result<()> {
        if step == 0 || step > self.steps.len() {
            return Err(Error::contract(format!("step {step} outside 1..={}", self.steps.len())));
        }
        Ok(())
    }

    pub fn current_classes(&self, step: usize) -> &[u8] {
        &self.steps[step - 1]
    }

    /// Classes of steps 1..=step, in step order.
    pub fn seen_classes(&self, step: usize) -> Vec<u8> {
        self.steps[..step].iter().flatten().copied().collect()
    }

    pub fn future_classes(&self, step: usize) -> Vec<u8> {
        self.steps[step..].iter().flatten().copied().collect()
    }

    /// Step that introduces `class`, if any.
    pub fn step_of(&self, class: u8) -> Option<usize> {
        self.steps.iter().position(|s| s.contains(&class)).map(|i| i + 1)
    }

    pub fn step_view(&self, index: &DatasetIndex, step: usize) -> Result<StepView> {
        Ok(StepView {
            step_index: step,
            current_classes: self.current_classes(step).to_vec(),
            seen_classes: self.seen_classes(step),
            image_ids: filter_images(index, self, step)?,
        })
    }
}

/// Training pool of one step. Overlapped keeps every image showing a
/// current class; disjoint additionally drops images showing a future class.
pub fn filter_images(index: &DatasetIndex, task: &TaskSpec, step: usize) -> Result<Vec<String>> {
    task.check_step(step)?;
    let current: BTreeSet<u8> = task.current_classes(step).iter().copied().collect();
    let future: BTreeSet<u8> = task.future_classes(step).into_iter().collect();
    let ids: Vec<String> = index
        .entries()
        .iter()
        .filter(|e| e.classes.iter().any(|c| current.contains(c)))
        .filter(|e| task.setup_mode == SetupMode::Overlapped || !e.classes.iter().any(|c| future.contains(c)))
        .map(|e| e.id.clone())
        .collect();
    if ids.is_empty() {
        log::warn!("step {step} of task {} has no qualifying images", task.split);
    }
    Ok(ids)
}

/// Keeps the current step's classes, sends every other foreground id to
/// background. Ignore pixels pass through.
pub fn remap_labels(gt: &LabelMap, task: &TaskSpec, step: usize) -> Result<LabelMap> {
    task.check_step(step)?;
    let current = task.current_classes(step);
    remap_keep(gt, current, task.total_fg_classes)
}

/// Generalisation of [`remap_labels`] to an arbitrary kept set.
pub fn remap_keep(gt: &LabelMap, keep: &[u8], total_fg_classes: u8) -> Result<LabelMap> {
    let mut lut = [BACKGROUND; 256];
    lut[IGNORE as usize] = IGNORE;
    for &c in keep {
        lut[c as usize] = c;
    }
    let mut data = Vec::with_capacity(gt.data.len());
    for &id in &gt.data {
        if id > total_fg_classes && id != IGNORE {
            return Err(Error::LabelOutOfRange { id, max: total_fg_classes });
        }
        data.push(lut[id as usize]);
    }
    Ok(LabelMap { height: gt.height, width: gt.width, data })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standard_setups_step_counts() {
        for (code, t) in [("15-5", 2), ("15-1", 6), ("10-1", 11), ("19-1", 2), ("5-3", 6), ("2-2", 10)] {
            assert_eq!(build_task(code, 20, SetupMode::Overlapped).unwrap().num_steps(), t, "{code}");
        }
    }

    #[test]
    fn fifteen_five_groups() {
        let t = build_task("15-5", 20, SetupMode::Overlapped).unwrap();
        assert_eq!(t.steps[0], (1..=15).collect::<Vec<u8>>());
        assert_eq!(t.steps[1], (16..=20).collect::<Vec<u8>>());
        let t = build_task("10-1", 20, SetupMode::Overlapped).unwrap();
        let sizes: Vec<usize> = t.steps.iter().map(Vec::len).collect();
        assert_eq!(sizes, [vec![10], vec![1; 10]].concat());
        let t = build_task("19-1", 20, SetupMode::Overlapped).unwrap();
        assert_eq!(t.steps[1], vec![20]);
    }

    #[test]
    fn malformed_codes_rejected() {
        for code in ["20-0", "0-5", "15-4", "15", "a-b", "-3-1", "21-1"] {
            assert!(
                matches!(build_task(code, 20, SetupMode::Overlapped), Err(Error::MalformedSplit { .. })),
                "{code}"
            );
        }
    }

    #[test]
    fn json_roundtrip() {
        let t = build_task("15-5", 20, SetupMode::Disjoint).unwrap();
        let s = serde_json::to_string(&t).unwrap();
        assert_eq!(s, r#"{"split":"15-5","mode":"disjoint","total_fg_classes":20}"#);
        let back: TaskSpec = serde_json::from_str(&s).unwrap();
        assert_eq!(back, t);
        assert!(serde_json::from_str::<TaskSpec>(r#"{"split":"15-4","total_fg_classes":20}"#).is_err());
    }

    fn map(data: Vec<u8>) -> LabelMap {
        let n = data.len();
        LabelMap::from_vec(1, n, data).unwrap()
    }

    #[test]
    fn remap_examples() {
        let t = build_task("15-5", 20, SetupMode::Overlapped).unwrap();
        let bg = map(vec![0; 6]);
        assert_eq!(remap_labels(&bg, &t, 1).unwrap(), bg);
        let gt = map(vec![0, 3, 3, 16, 255, 0]);
        assert_eq!(remap_labels(&gt, &t, 1).unwrap().data, vec![0, 3, 3, 0, 255, 0]);
        assert_eq!(remap_labels(&gt, &t, 2).unwrap().data, vec![0, 0, 0, 16, 255, 0]);
        assert!(matches!(remap_labels(&map(vec![21]), &t, 1), Err(Error::LabelOutOfRange { id: 21, .. })));
        assert!(remap_labels(&bg, &t, 3).is_err());
    }

    proptest! {
        #[test]
        fn built_tasks_partition_classes(base in 1u8..20, stride in 1u8..10) {
            let total = 20u8;
            match build_task(&format!("{base}-{stride}"), total, SetupMode::Overlapped) {
                Ok(t) => {
                    let mut all: Vec<u8> = t.steps.concat();
                    all.sort_unstable();
                    prop_assert_eq!(all, (1..=total).collect::<Vec<u8>>());
                    prop_assert_eq!(t.num_steps(), 1 + ((total - base) / stride) as usize);
                }
                Err(_) => prop_assert!((total - base) % stride != 0 || total - base < stride),
            }
        }

        #[test]
        fn remap_is_idempotent(data in proptest::collection::vec(0u8..=20, 1..64), step in 1usize..=6) {
            let t = build_task("15-1", 20, SetupMode::Overlapped).unwrap();
            let gt = map(data);
            let once = remap_labels(&gt, &t, step).unwrap();
            prop_assert_eq!(remap_labels(&once, &t, step).unwrap(), once);
        }
    }
}
