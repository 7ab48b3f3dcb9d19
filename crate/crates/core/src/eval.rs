//! Confusion matrices, grouped mIoU and report emission.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use candle_core::Device;
use serde::{Deserialize, Serialize};

use crate::data::DatasetIndex;
use crate::error::{Error, Result};
use crate::model::{images_to_tensor, EndingModel};
use crate::params::ParameterRegistry;
use crate::protocol::{TaskSpec, BACKGROUND, IGNORE};

/// Rows are ground truth, columns predictions; index 0 is background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n: usize,
    pub counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(n_fg_classes: u8) -> Self {
        let n = n_fg_classes as usize + 1;
        Self { n, counts: vec![0; n * n] }
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n + pred]
    }

    /// Adds one image. Pixels labelled `IGNORE` are skipped.
    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape(format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        let max = (self.n - 1) as u8;
        for (&p, &g) in pred.iter().zip(gt) {
            if g == IGNORE {
                continue;
            }
            for id in [p, g] {
                if id as usize >= self.n {
                    return Err(Error::LabelOutOfRange { id, max });
                }
            }
            self.counts[g as usize * self.n + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &Self) -> Result<()> {
        if other.n != self.n {
            return Err(Error::shape("confusion matrices of different sizes"));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }
}

/// IoU per class id; `None` when the class appears in neither ground
/// truth nor predictions.
pub fn iou_per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.n)
        .map(|c| {
            let tp = cm.get(c, c);
            let row: u64 = (0..cm.n).map(|p| cm.get(c, p)).sum();
            let col: u64 = (0..cm.n).map(|g| cm.get(g, c)).sum();
            let union = row + col - tp;
            (union > 0).then(|| tp as f64 / union as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub base: Vec<u8>,
    pub new: Vec<u8>,
}

impl GroupSpec {
    /// Base = first-step classes, new = everything added since.
    pub fn for_step(task: &TaskSpec, step: usize) -> Self {
        let base = task.current_classes(1).to_vec();
        let new = (2..=step).flat_map(|s| task.current_classes(s).iter().copied()).collect();
        Self { base, new }
    }

    fn range_label(ids: &[u8], with_background: bool) -> String {
        let lo = if with_background { 0 } else { ids.iter().copied().min().unwrap_or(0) };
        match ids.iter().copied().max() {
            Some(hi) => format!("{lo}-{hi}"),
            None => format!("{lo}"),
        }
    }

    pub fn base_label(&self) -> String {
        Self::range_label(&self.base, true)
    }

    pub fn new_label(&self) -> String {
        Self::range_label(&self.new, false)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub step: usize,
    pub per_class_iou: BTreeMap<u8, Option<f64>>,
    pub base_miou: Option<f64>,
    pub new_miou: Option<f64>,
    pub all_miou: Option<f64>,
    pub groups: GroupSpec,
    /// Scored classes missing from both ground truth and predictions.
    pub absent: Vec<u8>,
}

fn mean_of(per_class: &[Option<f64>], ids: impl Iterator<Item = u8>) -> Option<f64> {
    let vals: Vec<f64> = ids.filter_map(|c| per_class.get(c as usize).copied().flatten()).collect();
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Base mean includes background; new excludes it; all covers both.
pub fn grouped_miou(per_class: &[Option<f64>], groups: &GroupSpec, step: usize) -> Result<MetricReport> {
    let base: BTreeSet<u8> = groups.base.iter().copied().collect();
    if groups.new.iter().any(|c| base.contains(c)) || base.contains(&BACKGROUND) || groups.new.contains(&BACKGROUND) {
        return Err(Error::contract("metric groups overlap"));
    }
    let scored: Vec<u8> = std::iter::once(BACKGROUND).chain(groups.base.iter().copied()).chain(groups.new.iter().copied()).collect();
    if let Some(&c) = scored.iter().find(|&&c| c as usize >= per_class.len()) {
        return Err(Error::LabelOutOfRange { id: c, max: per_class.len().saturating_sub(1) as u8 });
    }
    Ok(MetricReport {
        step,
        per_class_iou: scored.iter().map(|&c| (c, per_class[c as usize])).collect(),
        base_miou: mean_of(per_class, std::iter::once(BACKGROUND).chain(groups.base.iter().copied())),
        new_miou: mean_of(per_class, groups.new.iter().copied()),
        all_miou: mean_of(per_class, scored.iter().copied()),
        groups: groups.clone(),
        absent: scored.iter().copied().filter(|&c| per_class[c as usize].is_none()).collect(),
    })
}

/// Ground truth of classes not yet introduced is excluded from scoring.
pub fn scoring_labels(gt: &[u8], seen: &[u8]) -> Vec<u8> {
    let mut keep = [false; 256];
    keep[BACKGROUND as usize] = true;
    for &c in seen {
        keep[c as usize] = true;
    }
    gt.iter().map(|&g| if keep[g as usize] { g } else { IGNORE }).collect()
}

/// Scores the model after `step` on every image of `val`, un-augmented.
pub fn evaluate(
    model: &EndingModel,
    reg: &ParameterRegistry,
    task: &TaskSpec,
    step: usize,
    val: &DatasetIndex,
    batch_size: usize,
) -> Result<MetricReport> {
    let seen = task.seen_classes(step);
    let ids = val.ids();
    let mut cm = ConfusionMatrix::new(task.total_fg_classes);
    for chunk in ids.chunks(batch_size.max(1)) {
        let samples = chunk.iter().map(|id| Ok((val.load(id)?, val.proposals(id, crate::data::PROPOSAL_SLOTS)?))).collect::<Result<Vec<_>>>()?;
        // images of different sizes are scored one at a time
        let same = samples.iter().all(|(s, _)| s.image.dims() == samples[0].0.image.dims());
        let groups: Vec<Vec<usize>> = if same { vec![(0..samples.len()).collect()] } else { (0..samples.len()).map(|i| vec![i]).collect() };
        for g in groups {
            let imgs: Vec<_> = g.iter().map(|&i| &samples[i].0.image).collect();
            let props: Vec<_> = g.iter().map(|&i| &samples[i].1).collect();
            let x = images_to_tensor(&imgs, reg.dtype(), &Device::Cpu)?;
            let preds = model.predict(reg, &x, &props, step)?;
            for (&i, pred) in g.iter().zip(&preds) {
                cm.accumulate(pred, &scoring_labels(&samples[i].0.label.data, &seen))?;
            }
        }
    }
    grouped_miou(&iou_per_class(&cm), &GroupSpec::for_step(task, step), step)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Table,
    Json,
    Plot,
}

/// Step-wise reports of one run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReports {
    pub name: String,
    pub reports: Vec<MetricReport>,
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.1}", 100.0 * v))
}

/// One row per run with the final step's grouped mIoU.
pub fn render_table(runs: &[RunReports]) -> String {
    let mut out = String::new();
    let Some(head) = runs.iter().find_map(|r| r.reports.last()) else {
        return out;
    };
    let name_w = runs.iter().map(|r| r.name.len()).max().unwrap_or(3).max(3);
    let _ = writeln!(out, "{:<name_w$} | {:>6} | {:>6} | {:>6}", "run", head.groups.base_label(), head.groups.new_label(), "all");
    for run in runs {
        if let Some(r) = run.reports.last() {
            let _ = writeln!(out, "{:<name_w$} | {:>6} | {:>6} | {:>6}", run.name, pct(r.base_miou), pct(r.new_miou), pct(r.all_miou));
        }
    }
    out
}

/// Line chart of all-class mIoU against step, one polyline per run.
pub fn render_plot(runs: &[RunReports]) -> String {
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];
    let (w, h, pad) = (480.0, 320.0, 48.0);
    let max_step = runs.iter().flat_map(|r| r.reports.iter().map(|m| m.step)).max().unwrap_or(1).max(2) as f64;
    let x = |s: usize| pad + (s as f64 - 1.0) / (max_step - 1.0) * (w - 2.0 * pad);
    let y = |v: f64| h - pad - v * (h - 2.0 * pad);
    let mut svg = String::new();
    let _ = writeln!(svg, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" font-family="sans-serif" font-size="11">"#);
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(svg, r#"<line x1="{pad}" y1="{}" x2="{}" y2="{}" stroke="black"/>"#, h - pad, w - pad, h - pad);
    let _ = writeln!(svg, r#"<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{}" stroke="black"/>"#, h - pad);
    for s in 1..=max_step as usize {
        let _ = writeln!(svg, r#"<text x="{:.1}" y="{}" text-anchor="middle">{s}</text>"#, x(s), h - pad + 16.0);
    }
    for t in 0..=5 {
        let v = t as f64 / 5.0;
        let _ = writeln!(svg, r#"<text x="{}" y="{:.1}" text-anchor="end">{:.0}</text>"#, pad - 6.0, y(v) + 4.0, v * 100.0);
    }
    let _ = writeln!(svg, r#"<text x="{}" y="{}" text-anchor="middle">step</text>"#, w / 2.0, h - 8.0);
    let _ = writeln!(svg, r#"<text x="14" y="{}" transform="rotate(-90 14 {})" text-anchor="middle">mIoU (%)</text>"#, h / 2.0, h / 2.0);
    for (i, run) in runs.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let pts: Vec<String> = run
            .reports
            .iter()
            .filter_map(|m| m.all_miou.map(|v| format!("{:.1},{:.1}", x(m.step), y(v))))
            .collect();
        let _ = writeln!(svg, r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#, pts.join(" "));
        for p in &pts {
            let (px, py) = p.split_once(',').unwrap_or(("0", "0"));
            let _ = writeln!(svg, r#"<circle cx="{px}" cy="{py}" r="3" fill="{color}"/>"#);
        }
        let ly = pad + 14.0 * i as f64;
        let _ = writeln!(svg, r#"<text x="{}" y="{ly:.1}" fill="{color}">{}</text>"#, w - pad - 100.0, xml_escape(&run.name));
    }
    svg.push_str("</svg>\n");
    svg
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Writes `report.txt`, `report.json` or `miou_steps.svg` into `dir` and
/// returns the path.
pub fn emit_report(runs: &[RunReports], format: ReportFormat, dir: &std::path::Path) -> Result<std::path::PathBuf> {
    if runs.iter().all(|r| r.reports.is_empty()) {
        return Err(Error::contract("no metric reports to emit"));
    }
    std::fs::create_dir_all(dir)?;
    let (name, body) = match format {
        ReportFormat::Table => ("report.txt", render_table(runs)),
        ReportFormat::Json => ("report.json", serde_json::to_string_pretty(runs)?),
        ReportFormat::Plot => ("miou_steps.svg", render_plot(runs)),
    };
    let path = dir.join(name);
    std::fs::write(&path, body)?;
    Ok(path)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;
    use rand::Rng;

    #[test]
    fn diagonal_and_additive() {
        let mut cm = ConfusionMatrix::new(3);
        let gt = vec![0, 1, 2, 3, 1, 1];
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!((0..4).map(|c| cm.get(c, c)).sum::<u64>(), 6);
        assert!(iou_per_class(&cm).iter().all(|v| *v == Some(1.0)));
        let pred = vec![0, 2, 2, 3, 0, 1];
        let mut whole = ConfusionMatrix::new(3);
        whole.accumulate(&pred, &gt).unwrap();
        let mut a = ConfusionMatrix::new(3);
        a.accumulate(&pred[..3], &gt[..3]).unwrap();
        let mut b = ConfusionMatrix::new(3);
        b.accumulate(&pred[3..], &gt[3..]).unwrap();
        a.merge(&b).unwrap();
        assert_eq!(a, whole);
        assert!(cm.accumulate(&[4], &[0]).is_err());
        assert!(cm.accumulate(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn hand_counted_iou_and_absent() {
        let mut cm = ConfusionMatrix::new(2);
        let gt = vec![1, 1, 1, 1, 0, 0];
        let pred = vec![1, 1, 0, 0, 1, 1];
        cm.accumulate(&pred, &gt).unwrap();
        let iou = iou_per_class(&cm);
        assert!((iou[1].unwrap() - 2.0 / 6.0).abs() < 1e-12);
        assert_eq!(iou[2], None);
    }

    #[test]
    fn matches_counting_oracle() {
        let mut rng = seed::rng(&[77]);
        for _ in 0..10 {
            let gt: Vec<u8> = (0..64).map(|_| if rng.gen_bool(0.05) { IGNORE } else { rng.gen_range(0..5) }).collect();
            let pred: Vec<u8> = (0..64).map(|_| rng.gen_range(0..5)).collect();
            let mut cm = ConfusionMatrix::new(4);
            cm.accumulate(&pred, &gt).unwrap();
            for g in 0..5u8 {
                for p in 0..5u8 {
                    let n = gt.iter().zip(&pred).filter(|(&a, &b)| a == g && b == p).count() as u64;
                    assert_eq!(cm.get(g as usize, p as usize), n);
                }
            }
            let iou = iou_per_class(&cm);
            for c in 0..5u8 {
                let tp = gt.iter().zip(&pred).filter(|(&a, &b)| a == c && b == c).count() as f64;
                let fp = gt.iter().zip(&pred).filter(|(&a, &b)| a != c && a != IGNORE && b == c).count() as f64;
                let fne = gt.iter().zip(&pred).filter(|(&a, &b)| a == c && b != c).count() as f64;
                if tp + fp + fne > 0.0 {
                    let expect = tp / (tp + fp + fne);
                    assert!((iou[c as usize].unwrap() - expect).abs() <= 1e-6 * expect.max(1e-12));
                }
            }
        }
    }

    #[test]
    fn grouped_means() {
        let ones = vec![Some(1.0); 6];
        let g = GroupSpec { base: vec![1, 2, 3], new: vec![4, 5] };
        let r = grouped_miou(&ones, &g, 2).unwrap();
        assert_eq!((r.base_miou, r.new_miou, r.all_miou), (Some(1.0), Some(1.0), Some(1.0)));
        let v = vec![Some(0.9), Some(0.5), None, Some(0.7), Some(0.2), Some(0.4)];
        let r = grouped_miou(&v, &g, 2).unwrap();
        assert!((r.base_miou.unwrap() - (0.9 + 0.5 + 0.7) / 3.0).abs() < 1e-12);
        assert!((r.new_miou.unwrap() - 0.3).abs() < 1e-12);
        assert!((r.all_miou.unwrap() - 2.7 / 5.0).abs() < 1e-12);
        assert_eq!(r.absent, vec![2]);
        assert_eq!(g.base_label(), "0-3");
        assert_eq!(g.new_label(), "4-5");
        let bad = GroupSpec { base: vec![1, 2], new: vec![2] };
        assert!(grouped_miou(&v, &bad, 2).is_err());
    }

    #[test]
    fn voc_fifteen_five_base_has_sixteen_entries() {
        let task = crate::protocol::build_task("15-5", 20, crate::protocol::SetupMode::Overlapped).unwrap();
        let g = GroupSpec::for_step(&task, 2);
        let per: Vec<Option<f64>> = (0..21).map(|c| Some(c as f64 / 20.0)).collect();
        let r = grouped_miou(&per, &g, 2).unwrap();
        assert!((r.base_miou.unwrap() - (0..16).map(|c| c as f64 / 20.0).sum::<f64>() / 16.0).abs() < 1e-12);
        assert_eq!(render_table(&[RunReports { name: "x".into(), reports: vec![r] }]).lines().next().unwrap().split('|').nth(1).unwrap().trim(), "0-15");
    }

    #[test]
    fn future_classes_are_not_scored() {
        assert_eq!(scoring_labels(&[0, 1, 3, 255, 2], &[1, 2]), vec![0, 1, IGNORE, IGNORE, 2]);
    }

    #[test]
    fn json_roundtrip_and_plot() {
        let g = GroupSpec { base: vec![1], new: vec![2] };
        let reports: Vec<MetricReport> = (1..=2)
            .map(|s| grouped_miou(&[Some(0.5), Some(0.25), if s == 2 { Some(0.125) } else { None }], &g, s).unwrap())
            .collect();
        let runs = vec![RunReports { name: "a".into(), reports }];
        let text = serde_json::to_string(&runs).unwrap();
        assert_eq!(serde_json::from_str::<Vec<RunReports>>(&text).unwrap(), runs);
        let svg = render_plot(&runs);
        assert_eq!(svg.matches("<circle").count(), 2);
        let dir = tempfile::tempdir().unwrap();
        assert!(emit_report(&runs, ReportFormat::Plot, dir.path()).unwrap().exists());
    }
}
