//! Step-wise training: freeze schedule, pseudo-labels from the previous
//! checkpoint, replay mixing, SGD with a poly schedule, checkpoints and
//! the end-of-step drift check.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use candle_core::backprop::GradStore;
use candle_core::{DType, Device, Tensor};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::{DatasetKind, Precision, RunConfig};
use crate::data::{augment, generate_synthetic_dataset, load_voc_layout, update_replay_memory, AugmentConfig, DatasetIndex, ReplayMemory, Sample, Transform};
use crate::error::{Error, Result};
use crate::eval::{emit_report, evaluate, MetricReport, RunReports};
use crate::heads::{bce_objective, cluster_predictions, contrastive_unseen_loss, total_loss};
use crate::labels::{apply_unknown_targets, generate_enhanced_labels, unlabeled_proposals, ChannelLayout, ScoreMap, UnknownClusterState};
use crate::model::{images_to_tensor, EndingModel};
use crate::params::{read_manifest, Checkpoint, Group, ParameterRegistry};
use crate::protocol::{build_task, filter_images, remap_labels, TaskSpec};
use crate::seed;
use crate::tensor_ops::to_f64_vec;

/// `lr0 * (1 - iter / max_iter)^power`.
pub fn poly_lr(iter: usize, max_iter: usize, lr0: f64, power: f64) -> Result<f64> {
    if max_iter == 0 {
        return Err(Error::config("poly schedule with max_iter = 0"));
    }
    if iter > max_iter {
        return Err(Error::contract(format!("iteration {iter} beyond max_iter {max_iter}")));
    }
    Ok(lr0 * (1.0 - iter as f64 / max_iter as f64).powf(power))
}

/// SGD with momentum and L2 weight decay folded into the gradient.
#[derive(Debug, Default)]
pub struct Sgd {
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: HashMap<String, Tensor>,
}

impl Sgd {
    pub fn new(momentum: f64, weight_decay: f64) -> Self {
        Self { momentum, weight_decay, velocity: HashMap::new() }
    }

    /// Updates every trainable parameter that received a gradient.
    pub fn step(&mut self, reg: &ParameterRegistry, grads: &GradStore, lr: f64) -> Result<()> {
        for p in reg.trainable_params() {
            let value = p.var.as_tensor();
            let Some(g) = grads.get(value) else { continue };
            let d = (g + (value.detach() * self.weight_decay)?)?;
            let v = match self.velocity.get(&p.name) {
                Some(prev) => ((prev * self.momentum)? + d)?,
                None => d,
            };
            p.var.set(&(value.detach() - (&v * lr)?)?)?;
            self.velocity.insert(p.name.clone(), v);
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLogRecord {
    pub step: usize,
    pub epoch: usize,
    pub iter: usize,
    pub loss_total: f64,
    pub loss_bce: f64,
    pub loss_c: f64,
    pub lr: f64,
}

/// Settings that shape a single loss evaluation.
#[derive(Clone, Copy, Debug)]
pub struct LossSettings {
    pub tau: f32,
    pub unlabeled_overlap_threshold: f64,
}

pub struct BatchLoss {
    pub total: Tensor,
    pub bce: Tensor,
    pub lc: Tensor,
    pub pseudo_labeled: usize,
}

/// Forward pass, target construction and loss for one batch at `step`.
/// `prev` is the frozen previous-step registry (required for step > 1).
pub fn batch_loss(
    model: &EndingModel,
    reg: &ParameterRegistry,
    prev: Option<&ParameterRegistry>,
    samples: &[Sample],
    step: usize,
    clusters: &mut UnknownClusterState,
    settings: LossSettings,
) -> Result<BatchLoss> {
    let imgs: Vec<_> = samples.iter().map(|s| &s.image.image).collect();
    let props: Vec<_> = samples.iter().map(|s| &s.proposals).collect();
    let x = images_to_tensor(&imgs, reg.dtype(), reg.device())?;
    let (b, _, h, w) = x.dims4()?;
    let out = model.forward(reg, &x, &props, step)?;
    let layout: &ChannelLayout = model.layout();

    let prev_scores: Vec<Option<ScoreMap>> = match (step, prev) {
        (1, _) => vec![None; b],
        (_, Some(prev_reg)) => {
            let s = model.scores(prev_reg, &x, &props, step - 1)?.to_dtype(DType::F32)?;
            let c = s.dim(1)?;
            (0..b)
                .map(|i| Ok(Some(ScoreMap::new(c, h, w, s.get(i)?.flatten_all()?.to_vec1::<f32>()?)?)))
                .collect::<Result<_>>()?
        }
        (_, None) => return Err(Error::contract(format!("step {step} needs the previous model"))),
    };
    let mut labels = samples
        .iter()
        .zip(&prev_scores)
        .map(|(s, p)| generate_enhanced_labels(&s.image.label, layout, step, p.as_ref(), settings.tau))
        .collect::<Result<Vec<_>>>()?;

    let n = out.proposals.n;
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); clusters.k];
    if step == 1 {
        let p_out = out.prototypes.p_out.detach();
        let dim = p_out.dim(2)?;
        let rows = to_f64_vec(&p_out)?;
        let usable = to_f64_vec(&out.proposals.usable)?;
        let mut picked = Vec::new();
        for (i, lab) in labels.iter().enumerate() {
            for j in unlabeled_proposals(lab, layout, &samples[i].proposals, settings.unlabeled_overlap_threshold) {
                if j < n && usable[i * n + j] > 0.0 {
                    picked.push((i, j));
                }
            }
        }
        let protos: Vec<Vec<f64>> = picked.iter().map(|&(i, j)| rows[(i * n + j) * dim..(i * n + j + 1) * dim].to_vec()).collect();
        let ids = crate::labels::assign_unknown_clusters(clusters, &protos)?;
        for (&(i, j), &c) in picked.iter().zip(&ids) {
            apply_unknown_targets(&mut labels[i], &samples[i].proposals, &[(j, c)]);
            members[c].push(i * n + j);
        }
    }

    let dt = reg.dtype();
    let dev = reg.device();
    let channels = labels[0].channels;
    let targets: Vec<f32> = labels.iter().flat_map(|l| l.one_hot()).collect();
    let valid: Vec<f32> = labels.iter().flat_map(|l| l.valid_mask().into_iter().map(f32::from)).collect();
    let targets = Tensor::from_vec(targets, (b, channels, h, w), dev)?.to_dtype(dt)?;
    let valid = Tensor::from_vec(valid, (b, 1, h, w), dev)?.to_dtype(dt)?;
    let bce = bce_objective(&out.y1, &out.y2, &targets, &valid, step)?;
    let lc = match step {
        1 => {
            let head1 = out.proposal_logits.narrow(2, 0, layout.head_width(1))?;
            match cluster_predictions(&head1, &members)? {
                Some(o) => contrastive_unseen_loss(&o)?,
                None => Tensor::zeros((), dt, dev)?,
            }
        }
        _ => Tensor::zeros((), dt, dev)?,
    };
    let total = total_loss(&bce, &lc)?;
    Ok(BatchLoss { total, bce, lc, pseudo_labeled: labels.iter().map(|l| l.pseudo_labeled).sum() })
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

pub struct ExperimentState {
    pub model: EndingModel,
    pub registry: ParameterRegistry,
    pub clusters: UnknownClusterState,
    pub replay: Option<ReplayMemory>,
    pub history: Vec<MetricReport>,
}

/// Everything a run needs, built from a validated config.
pub struct Experiment {
    pub config: RunConfig,
    pub task: TaskSpec,
    pub train: DatasetIndex,
    pub val: DatasetIndex,
    pub run_dir: PathBuf,
    pub state: ExperimentState,
}

pub fn step_dir(run_dir: &Path, step: usize) -> PathBuf {
    run_dir.join(format!("step_{step}"))
}

pub fn dtype_of(p: Precision) -> DType {
    match p {
        Precision::F32 => DType::F32,
        Precision::F64 => DType::F64,
    }
}

/// Train and validation indices for the configured dataset.
pub fn load_datasets(cfg: &RunConfig) -> Result<(DatasetIndex, DatasetIndex)> {
    let d = &cfg.dataset;
    match d.kind {
        DatasetKind::Synthetic => {
            let all = generate_synthetic_dataset(d.seed, cfg.task.total_classes, d.train_images + d.val_images, d.image_size)?;
            Ok(all.split_at(d.train_images))
        }
        DatasetKind::Voc => {
            let root = PathBuf::from(d.path.as_deref().unwrap_or("."));
            Ok((load_voc_layout(&root, "train")?, load_voc_layout(&root, "val")?))
        }
    }
}

/// Fresh model with parameters drawn from the run seed; heads are added
/// per step.
pub fn build_model(cfg: &RunConfig, task: &TaskSpec) -> Result<(EndingModel, ParameterRegistry)> {
    let layout = ChannelLayout::new(cfg.labels.k.unwrap_or(1), task.steps.clone())?;
    let mut reg = ParameterRegistry::new(dtype_of(cfg.train.precision), Device::Cpu);
    let mut rng = seed::rng(&[cfg.seed(), 0x1417]);
    let model = EndingModel::new(cfg.model_spec(), layout, &mut reg, &mut rng)?;
    Ok((model, reg))
}

/// Adds the heads of steps `1..=step` in order, drawing from the same
/// per-step streams as training.
pub fn add_head(model: &EndingModel, reg: &mut ParameterRegistry, cfg: &RunConfig, step: usize) -> Result<()> {
    model.heads.add_head(reg, &mut seed::rng(&[cfg.seed(), 0x4ead, step as u64]), step)
}

/// Model as saved after `step`, loaded from its checkpoint.
pub fn load_trained(cfg: &RunConfig, task: &TaskSpec, run_dir: &Path, step: usize) -> Result<(EndingModel, ParameterRegistry)> {
    let (model, mut reg) = build_model(cfg, task)?;
    for s in 1..=step {
        add_head(&model, &mut reg, cfg, s)?;
    }
    let ckpt = Checkpoint::read(&step_dir(run_dir, step).join("checkpoint.safetensors"), &Device::Cpu)?;
    reg.load_checkpoint(&ckpt)?;
    reg.freeze_all();
    Ok((model, reg))
}

impl Experiment {
    pub fn new(config: RunConfig, run_dir: PathBuf) -> Result<Self> {
        config.validate()?;
        let task = build_task(&config.task.split, config.task.total_classes, config.task.mode)?;
        let (train, val) = load_datasets(&config)?;
        if train.n_fg_classes() < config.task.total_classes {
            log::warn!("dataset declares {} classes, task expects {}", train.n_fg_classes(), config.task.total_classes);
        }
        let (model, registry) = build_model(&config, &task)?;
        let clusters = UnknownClusterState::new(config.labels.k.unwrap_or(1), model.heads.proto_dim)?;
        let replay = if config.train.replay.enabled { Some(ReplayMemory::new(config.train.replay.capacity)?) } else { None };
        Ok(Self {
            config,
            task,
            train,
            val,
            run_dir,
            state: ExperimentState { model, registry, clusters, replay, history: Vec::new() },
        })
    }

    fn step_samples(&self, step: usize) -> Result<Vec<Sample>> {
        let ids = filter_images(&self.train, &self.task, step)?;
        ids.par_iter()
            .map(|id| {
                let mut image = self.train.load(id)?;
                image.label = remap_labels(&image.label, &self.task, step)?;
                Ok(Sample { image, proposals: self.train.proposals(id, crate::data::PROPOSAL_SLOTS)? })
            })
            .collect()
    }

    /// Trains step `step` (1-based), checks frozen groups, checkpoints,
    /// updates replay memory and evaluates.
    pub fn run_step(&mut self, step: usize) -> Result<MetricReport> {
        let cfg = self.config.clone();
        let seed_v = cfg.seed();
        let dir = step_dir(&self.run_dir, step);
        std::fs::create_dir_all(&dir)?;

        let prev = if step > 1 {
            let snap = self.state.registry.snapshot()?;
            snap.load_checkpoint(&Checkpoint::read(&step_dir(&self.run_dir, step - 1).join("checkpoint.safetensors"), &Device::Cpu)?)?;
            Some(snap)
        } else {
            None
        };

        add_head(&self.state.model, &mut self.state.registry, &cfg, step)?;
        self.state.registry.apply_freeze_schedule(step);
        log::info!(
            "step {step}: trainable groups {:?}",
            self.state.registry.trainable_groups().iter().map(|g| g.to_string()).collect::<Vec<_>>()
        );

        let current = self.step_samples(step)?;
        if current.is_empty() {
            log::warn!("step {step} has no training images; heads.{step} keeps its initial weights");
        }
        let bsz = cfg.train.batch_size;
        let per_epoch = current.len().div_ceil(bsz);
        let max_iter = cfg.train.epochs_per_step * per_epoch;
        let lr0 = if step == 1 { cfg.train.lr0_step1 } else { cfg.train.lr0_later };
        let crop = cfg.dataset.crop_size.unwrap_or(cfg.dataset.image_size);
        let aug = AugmentConfig::with_crop(crop);
        let settings = LossSettings { tau: cfg.labels.tau, unlabeled_overlap_threshold: cfg.labels.unlabeled_overlap_threshold };
        let prepare = |s: &Sample, key: &[u64]| -> Sample {
            if cfg.dataset.augment {
                augment(s, &aug, &mut seed::rng(key))
            } else {
                Transform::identity(crop).apply(s)
            }
        };

        let mut sgd = Sgd::new(cfg.train.momentum, cfg.train.weight_decay);
        let mut log = BufWriter::new(File::create(dir.join("train_log.ndjson"))?);
        let step_u = step as u64;
        let mut iter = 0;
        for epoch in 0..cfg.train.epochs_per_step {
            let mut order: Vec<usize> = (0..current.len()).collect();
            rand::seq::SliceRandom::shuffle(order.as_mut_slice(), &mut seed::rng(&[seed_v, step_u, epoch as u64, 0x5f]));
            for (bi, chunk) in order.chunks(bsz).enumerate() {
                let mut batch: Vec<Sample> = chunk
                    .par_iter()
                    .map(|&i| prepare(&current[i], &[seed_v, step_u, epoch as u64, i as u64, 0xa6]))
                    .collect();
                if let (Some(mem), true) = (&self.state.replay, step > 1) {
                    let mut rng = seed::rng(&[seed_v, step_u, epoch as u64, bi as u64, 0x7e]);
                    let drawn = mem.draw(bsz.div_ceil(3), &mut rng);
                    let extra: Vec<Sample> = drawn
                        .par_iter()
                        .enumerate()
                        .map(|(k, e)| prepare(&e.sample, &[seed_v, step_u, epoch as u64, bi as u64, k as u64, 0x7f]))
                        .collect();
                    batch.extend(extra);
                }
                let lr = poly_lr(iter, max_iter, lr0, cfg.train.poly_power)?;
                let loss = batch_loss(
                    &self.state.model,
                    &self.state.registry,
                    prev.as_ref(),
                    &batch,
                    step,
                    &mut self.state.clusters,
                    settings,
                )?;
                let total = scalar(&loss.total)?;
                if !total.is_finite() {
                    return Err(Error::Numeric(format!("loss became {total} at step {step}, iteration {iter}")));
                }
                let grads = loss.total.backward()?;
                sgd.step(&self.state.registry, &grads, lr)?;
                let rec = TrainLogRecord {
                    step,
                    epoch,
                    iter,
                    loss_total: total,
                    loss_bce: scalar(&loss.bce)?,
                    loss_c: scalar(&loss.lc)?,
                    lr,
                };
                writeln!(log, "{}", serde_json::to_string(&rec)?)?;
                iter += 1;
            }
        }
        log.flush()?;

        if cfg.debug.inject_frozen_drift_step == Some(step) {
            let p = self.state.registry.params().iter().find(|p| p.group == Group::Backbone).expect("backbone has parameters");
            let bumped = (p.var.as_tensor().detach() + 1e-3)?;
            self.state.registry.set_value(&p.name.clone(), &bumped)?;
        }
        if step > 1 {
            let before = read_manifest(&step_dir(&self.run_dir, step - 1).join("manifest.json"))?;
            self.state.registry.verify_frozen(step, &before)?;
        }
        self.state.registry.save(&dir.join("checkpoint.safetensors"), step)?;
        let manifest = self.state.registry.manifest(step)?;
        std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

        if let Some(mem) = self.state.replay.as_mut() {
            let seen = self.task.seen_classes(step);
            update_replay_memory(mem, step, &current, self.task.current_classes(step), &seen, &mut seed::rng(&[seed_v, step_u, 0x3e]))?;
            log::info!("step {step}: replay memory holds {} samples", mem.len());
        }

        let report = evaluate(&self.state.model, &self.state.registry, &self.task, step, &self.val, bsz)?;
        std::fs::write(dir.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
        log::info!("step {step}: all mIoU {:?}", report.all_miou);
        self.state.history.push(report.clone());
        Ok(report)
    }

    pub fn run(&mut self) -> Result<Vec<MetricReport>> {
        std::fs::create_dir_all(&self.run_dir)?;
        std::fs::write(self.run_dir.join("resolved_config.json"), serde_json::to_string_pretty(&self.config)?)?;
        for step in 1..=self.task.num_steps() {
            self.run_step(step)?;
        }
        let runs = [RunReports { name: self.config.output.run_name.clone(), reports: self.state.history.clone() }];
        for &fmt in &self.config.output.formats {
            emit_report(&runs, fmt, &self.run_dir)?;
        }
        Ok(self.state.history.clone())
    }
}

/// Runs every step under `<output.root>/<output.run_name>`.
pub fn run_experiment(cfg: &RunConfig) -> Result<Vec<MetricReport>> {
    let dir = Path::new(&cfg.output.root).join(&cfg.output.run_name);
    Experiment::new(cfg.clone(), dir)?.run()
}
