//! Frozen-backbone transfer evaluation.
//!
//! The audio backbone is held fixed; a one-hidden-layer MLP is trained on
//! its 3-second segment features, one probe per downstream task and
//! random seed. Training follows the usual small-probe protocol: random
//! crops re-drawn every epoch, reduce-on-plateau learning rate, early
//! stopping, best-validation snapshot. Track-level evaluation averages
//! per-clip probabilities over non-overlapping 3-second clips.
//!
//! To keep a single-core run affordable, the three seeds of a task train
//! in lockstep: each epoch's crop features are extracted once and shared,
//! so the seeds differ only in probe initialization and batch order.

use std::collections::BTreeMap;
use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::attention::Dense;
use crate::audio::{self, AudioClip, AudioError, SEGMENT_SECONDS};
use crate::backbone::{AudioBackbone, BackboneError};
use crate::corpus::{LoadedCorpus, ManifestEntry};
use crate::metrics::{self, MetricError};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Tensor, TensorError};

/// Seed of the shared crop stream (common to all probe seeds, varying
/// only with the epoch, so reruns reproduce the same crops).
const CROP_SEED: u64 = 0;

#[derive(Debug, Error)]
pub enum ProbeError {
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("probe: {0}")]
    Contract(String),
}

impl From<BackboneError> for ProbeError {
    fn from(e: BackboneError) -> Self {
        match e {
            BackboneError::Audio(a) => ProbeError::Audio(a),
            BackboneError::Tensor(t) => ProbeError::Tensor(t),
        }
    }
}

fn contract(msg: impl Into<String>) -> ProbeError {
    ProbeError::Contract(msg.into())
}

// ──────────────────────────── Configuration ────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    /// Multiplier applied to the learning rate on plateau.
    pub lr_factor: f64,
    /// Epochs without validation improvement before the rate drops.
    pub lr_patience: usize,
    /// Epochs without validation improvement before training stops.
    pub early_stop_patience: usize,
    pub seeds: Vec<u64>,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            hidden: 512,
            epochs: 200,
            batch: 64,
            lr: 1e-3,
            weight_decay: 0.01,
            lr_factor: 0.5,
            lr_patience: 5,
            early_stop_patience: 20,
            seeds: vec![0, 1, 2],
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.hidden == 0 || self.epochs == 0 || self.batch == 0 {
            return Err("hidden, epochs, batch must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err("lr must be positive and finite".into());
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err("weight_decay must be non-negative".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return Err("lr_factor must lie in (0, 1)".into());
        }
        if self.lr_patience == 0 || self.early_stop_patience == 0 {
            return Err("patience values must be positive".into());
        }
        if self.seeds.is_empty() {
            return Err("at least one probe seed is required".into());
        }
        Ok(())
    }
}

// ─────────────────────────── Tasks and targets ─────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskName {
    Instrument,
    Tags,
    Mood,
}

impl TaskName {
    pub fn parse(s: &str) -> Result<TaskName, ProbeError> {
        match s {
            "instrument" => Ok(TaskName::Instrument),
            "tags" => Ok(TaskName::Tags),
            "mood" => Ok(TaskName::Mood),
            other => Err(contract(format!(
                "unknown task {other:?}; expected instrument, tags, or mood"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskName::Instrument => "instrument",
            TaskName::Tags => "tags",
            TaskName::Mood => "mood",
        }
    }
}

/// Output-head family and width of a task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TaskKind {
    /// Softmax over `classes`.
    SingleLabel { classes: usize },
    /// Independent sigmoids over `labels`.
    MultiLabel { labels: usize },
    /// Linear outputs of width `dims`.
    Regression { dims: usize },
}

impl TaskKind {
    pub fn out_dim(&self) -> usize {
        match self {
            TaskKind::SingleLabel { classes } => *classes,
            TaskKind::MultiLabel { labels } => *labels,
            TaskKind::Regression { dims } => *dims,
        }
    }
}

/// Ground truth for one track under one task.
#[derive(Debug, Clone, PartialEq)]
pub enum Target {
    Class(usize),
    MultiHot(Vec<bool>),
    Reals(Vec<f64>),
}

/// Derive the task head and per-entry targets from manifest labels.
pub fn targets_for(
    task: TaskName,
    entries: &[ManifestEntry],
) -> Result<(TaskKind, Vec<Target>), ProbeError> {
    if entries.is_empty() {
        return Err(contract("empty manifest"));
    }
    match task {
        TaskName::Instrument => {
            let classes = entries.iter().map(|e| e.labels.instrument).max().unwrap() + 1;
            let targets = entries.iter().map(|e| Target::Class(e.labels.instrument)).collect();
            Ok((TaskKind::SingleLabel { classes }, targets))
        }
        TaskName::Tags => {
            let labels = entries
                .iter()
                .flat_map(|e| e.labels.tags.iter().copied())
                .max()
                .map(|m| m + 1)
                .ok_or_else(|| contract("no tags anywhere in the manifest"))?;
            let targets = entries
                .iter()
                .map(|e| {
                    let mut hot = vec![false; labels];
                    for &t in &e.labels.tags {
                        hot[t] = true;
                    }
                    Target::MultiHot(hot)
                })
                .collect();
            Ok((TaskKind::MultiLabel { labels }, targets))
        }
        TaskName::Mood => {
            let targets =
                entries.iter().map(|e| Target::Reals(e.labels.mood.to_vec())).collect();
            Ok((TaskKind::Regression { dims: 2 }, targets))
        }
    }
}

// ───────────────────────── Feature extraction ──────────────────────────

/// One frozen 3-second segment feature: the backbone output as plain
/// numbers, cut off from any gradient graph.
pub fn segment_feature(
    backbone: &AudioBackbone,
    segment: &AudioClip,
) -> Result<Vec<f64>, ProbeError> {
    let mel = backbone.mel_of(segment)?;
    Ok(backbone.encode_segment(&mel)?.data_vec())
}

/// Features of every non-overlapping 3-second clip of a track.
pub fn track_features(
    backbone: &AudioBackbone,
    clip: &AudioClip,
) -> Result<Vec<Vec<f64>>, ProbeError> {
    let segs = audio::segment(clip, SEGMENT_SECONDS, audio::MAX_TRACK_SECONDS)?;
    segs.iter().map(|s| segment_feature(backbone, s)).collect()
}

/// One random-crop feature per listed track, shared across probe seeds:
/// the crop stream depends only on the epoch.
pub fn crop_features(
    backbone: &AudioBackbone,
    corpus: &LoadedCorpus,
    indices: &[usize],
    epoch: usize,
) -> Result<Vec<Vec<f64>>, ProbeError> {
    let mut rng: ChaCha8Rng = crate::rng::stream(CROP_SEED, "probe-crop", epoch as u64);
    indices
        .iter()
        .map(|&i| {
            let crop = audio::random_crop(&corpus.clips[i], SEGMENT_SECONDS, &mut rng)?;
            segment_feature(backbone, &crop)
        })
        .collect()
}

// ─────────────────────────────── The MLP ───────────────────────────────

pub struct ProbeMlp {
    pub l1: Dense,
    pub l2: Dense,
    pub kind: TaskKind,
}

impl ProbeMlp {
    pub fn new(dim: usize, hidden: usize, kind: TaskKind, seed: u64) -> ProbeMlp {
        let mut rng = crate::rng::stream(seed, "probe-init", 0);
        ProbeMlp {
            l1: Dense::new(dim, hidden, &mut rng),
            l2: Dense::new(hidden, kind.out_dim(), &mut rng),
            kind,
        }
    }

    pub fn params(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        self.l1.params("probe.l1", &mut out);
        self.l2.params("probe.l2", &mut out);
        out
    }

    fn logits(&self, x: &Tensor) -> Result<Tensor, TensorError> {
        self.l2.forward(&self.l1.forward(x)?.relu()?)
    }

    /// Training loss for one feature batch.
    pub fn loss(&self, x: &Tensor, targets: &[&Target]) -> Result<Tensor, TensorError> {
        let logits = self.logits(x)?;
        match &self.kind {
            TaskKind::SingleLabel { .. } => {
                let ids: Vec<usize> = targets
                    .iter()
                    .map(|t| match t {
                        Target::Class(c) => *c,
                        _ => unreachable!("single-label task with non-class target"),
                    })
                    .collect();
                logits.cross_entropy(&ids)
            }
            TaskKind::MultiLabel { labels } => {
                let mut y = Vec::with_capacity(targets.len() * labels);
                for t in targets {
                    match t {
                        Target::MultiHot(h) => y.extend(h.iter().map(|&b| f64::from(b as u8))),
                        _ => unreachable!("multi-label task with non-multi-hot target"),
                    }
                }
                logits.sigmoid()?.bce_from_prob(&y)
            }
            TaskKind::Regression { dims } => {
                let mut y = Vec::with_capacity(targets.len() * dims);
                for t in targets {
                    match t {
                        Target::Reals(r) => y.extend_from_slice(r),
                        _ => unreachable!("regression task with non-real target"),
                    }
                }
                let target = Tensor::from_vec(&[targets.len(), *dims], y)?;
                let diff = logits.sub(&target)?;
                diff.mul(&diff)?.mean_all()
            }
        }
    }

    /// Per-row predictions in probability space (softmax / sigmoid) or
    /// raw values for regression. `feats` are rows of one track's clips.
    pub fn predict_rows(&self, feats: &[Vec<f64>]) -> Result<Vec<Vec<f64>>, ProbeError> {
        if feats.is_empty() {
            return Err(contract("no clip features to predict from"));
        }
        let dim = feats[0].len();
        let flat: Vec<f64> = feats.iter().flat_map(|f| f.iter().copied()).collect();
        let x = Tensor::from_vec(&[feats.len(), dim], flat)?;
        let logits = self.logits(&x)?;
        let out = match self.kind {
            TaskKind::SingleLabel { .. } => logits.softmax_rows()?,
            TaskKind::MultiLabel { .. } => logits.sigmoid()?,
            TaskKind::Regression { .. } => logits,
        };
        let cols = out.cols();
        let data = out.data_vec();
        Ok(data.chunks(cols).map(|c| c.to_vec()).collect())
    }

    fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params().iter().map(|(_, p)| p.data_vec()).collect()
    }

    fn restore(&self, snap: &[Vec<f64>]) -> Result<(), TensorError> {
        for ((_, p), s) in self.params().iter().zip(snap) {
            p.set_data(s)?;
        }
        Ok(())
    }
}

/// Track-level prediction: the arithmetic mean of per-clip predictions.
pub fn evaluate_track(probe: &ProbeMlp, clip_feats: &[Vec<f64>]) -> Result<Vec<f64>, ProbeError> {
    let rows = probe.predict_rows(clip_feats)?;
    let n = rows.len() as f64;
    let mut mean = vec![0.0; rows[0].len()];
    for row in &rows {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= n;
    }
    Ok(mean)
}

/// Convenience wrapper over raw audio: segment, featurize, average.
pub fn evaluate_clip(
    probe: &ProbeMlp,
    backbone: &AudioBackbone,
    clip: &AudioClip,
) -> Result<Vec<f64>, ProbeError> {
    evaluate_track(probe, &track_features(backbone, clip)?)
}

/// The task's headline metric over track-level predictions.
pub fn task_metric(
    kind: &TaskKind,
    preds: &[Vec<f64>],
    targets: &[Target],
) -> Result<f64, ProbeError> {
    match kind {
        TaskKind::SingleLabel { .. } => {
            let pred_ids: Vec<usize> = preds
                .iter()
                .map(|p| {
                    p.iter()
                        .enumerate()
                        .max_by(|(_, a), (_, b)| a.total_cmp(b))
                        .map(|(i, _)| i)
                        .unwrap_or(0)
                })
                .collect();
            let truth: Vec<usize> = targets
                .iter()
                .map(|t| match t {
                    Target::Class(c) => *c,
                    _ => unreachable!(),
                })
                .collect();
            Ok(metrics::accuracy(&pred_ids, &truth)?)
        }
        TaskKind::MultiLabel { .. } => {
            let truth: Vec<Vec<bool>> = targets
                .iter()
                .map(|t| match t {
                    Target::MultiHot(h) => h.clone(),
                    _ => unreachable!(),
                })
                .collect();
            Ok(metrics::roc_auc_macro(preds, &truth)?.mean)
        }
        TaskKind::Regression { .. } => {
            let truth: Vec<Vec<f64>> = targets
                .iter()
                .map(|t| match t {
                    Target::Reals(r) => r.clone(),
                    _ => unreachable!(),
                })
                .collect();
            Ok(metrics::r_squared_multi(preds, &truth)?)
        }
    }
}

// ───────────────────────────── Training loop ───────────────────────────

pub struct SeedOutcome {
    pub seed: u64,
    pub best_epoch: usize,
    pub best_val_metric: f64,
    pub epochs_run: usize,
    pub lr_reductions: usize,
    /// The probe restored to its best-validation weights.
    pub probe: ProbeMlp,
}

struct RunState {
    seed: u64,
    probe: ProbeMlp,
    params: Vec<(String, Tensor)>,
    opt: Adam,
    best_metric: f64,
    best_epoch: usize,
    best_weights: Vec<Vec<f64>>,
    since_improve: usize,
    since_lr: usize,
    lr_reductions: usize,
    epochs_run: usize,
    stopped: bool,
}

impl RunState {
    fn new(dim: usize, kind: &TaskKind, cfg: &ProbeConfig, seed: u64) -> RunState {
        let probe = ProbeMlp::new(dim, cfg.hidden, kind.clone(), seed);
        let params = probe.params();
        let opt = Adam::new(AdamConfig {
            lr: cfg.lr,
            weight_decay: cfg.weight_decay,
            ..Default::default()
        });
        RunState {
            seed,
            best_weights: probe.snapshot(),
            probe,
            params,
            opt,
            best_metric: f64::NEG_INFINITY,
            best_epoch: 0,
            since_improve: 0,
            since_lr: 0,
            lr_reductions: 0,
            epochs_run: 0,
            stopped: false,
        }
    }

    fn train_epoch(
        &mut self,
        feats: &[Vec<f64>],
        targets: &[Target],
        batch: usize,
        epoch: usize,
    ) -> Result<(), ProbeError> {
        let dim = feats[0].len();
        let mut order: Vec<usize> = (0..feats.len()).collect();
        order.shuffle(&mut crate::rng::stream(self.seed, "probe-order", epoch as u64));
        for chunk in order.chunks(batch) {
            let flat: Vec<f64> =
                chunk.iter().flat_map(|&i| feats[i].iter().copied()).collect();
            let x = Tensor::from_vec(&[chunk.len(), dim], flat)?;
            let refs: Vec<&Target> = chunk.iter().map(|&i| &targets[i]).collect();
            let loss = self.probe.loss(&x, &refs)?;
            loss.backward()?;
            self.opt.step(&self.params)?;
        }
        self.epochs_run = epoch;
        Ok(())
    }

    fn observe_val(&mut self, metric: f64, epoch: usize, cfg: &ProbeConfig) {
        if metric > self.best_metric {
            self.best_metric = metric;
            self.best_epoch = epoch;
            self.best_weights = self.probe.snapshot();
            self.since_improve = 0;
            self.since_lr = 0;
            return;
        }
        self.since_improve += 1;
        self.since_lr += 1;
        if self.since_lr >= cfg.lr_patience {
            self.opt.cfg.lr *= cfg.lr_factor;
            self.lr_reductions += 1;
            self.since_lr = 0;
        }
        if self.since_improve >= cfg.early_stop_patience {
            self.stopped = true;
        }
    }
}

/// Train one probe per seed, in lockstep over epochs so the per-epoch
/// features (from `epoch_features`) are shared. Each probe honors the
/// plateau schedule and early stopping independently and comes back
/// restored to its best-validation weights.
pub fn train_probes(
    dim: usize,
    kind: &TaskKind,
    train_targets: &[Target],
    mut epoch_features: impl FnMut(usize) -> Result<Vec<Vec<f64>>, ProbeError>,
    val_features: &[Vec<Vec<f64>>],
    val_targets: &[Target],
    cfg: &ProbeConfig,
) -> Result<Vec<SeedOutcome>, ProbeError> {
    cfg.validate().map_err(contract)?;
    if train_targets.is_empty() || val_targets.is_empty() {
        return Err(contract("train and validation splits must be non-empty"));
    }
    if val_features.len() != val_targets.len() {
        return Err(contract("validation features and targets are misaligned"));
    }
    if let TaskKind::SingleLabel { .. } = kind {
        let mut seen = std::collections::HashSet::new();
        for t in train_targets {
            if let Target::Class(c) = t {
                seen.insert(*c);
            }
        }
        if seen.len() < 2 {
            return Err(contract("single-label training split has fewer than two classes"));
        }
    }
    let mut runs: Vec<RunState> =
        cfg.seeds.iter().map(|&s| RunState::new(dim, kind, cfg, s)).collect();
    for epoch in 1..=cfg.epochs {
        if runs.iter().all(|r| r.stopped) {
            break;
        }
        let feats = epoch_features(epoch)?;
        if feats.len() != train_targets.len() {
            return Err(contract("epoch features and train targets are misaligned"));
        }
        for run in runs.iter_mut().filter(|r| !r.stopped) {
            run.train_epoch(&feats, train_targets, cfg.batch, epoch)?;
            let mut preds = Vec::with_capacity(val_features.len());
            for clip_feats in val_features {
                preds.push(evaluate_track(&run.probe, clip_feats)?);
            }
            let metric = task_metric(kind, &preds, val_targets)?;
            run.observe_val(metric, epoch, cfg);
        }
    }
    Ok(runs
        .into_iter()
        .map(|run| {
            run.probe.restore(&run.best_weights).expect("snapshot shapes match");
            SeedOutcome {
                seed: run.seed,
                best_epoch: run.best_epoch,
                best_val_metric: run.best_metric,
                epochs_run: run.epochs_run,
                lr_reductions: run.lr_reductions,
                probe: run.probe,
            }
        })
        .collect())
}

/// Single-seed convenience wrapper used by feature-level experiments.
pub fn train_probe(
    dim: usize,
    kind: &TaskKind,
    train_targets: &[Target],
    epoch_features: impl FnMut(usize) -> Result<Vec<Vec<f64>>, ProbeError>,
    val_features: &[Vec<Vec<f64>>],
    val_targets: &[Target],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<SeedOutcome, ProbeError> {
    let cfg = ProbeConfig { seeds: vec![seed], ..cfg.clone() };
    let mut outcomes = train_probes(
        dim,
        kind,
        train_targets,
        epoch_features,
        val_features,
        val_targets,
        &cfg,
    )?;
    Ok(outcomes.pop().expect("one outcome per seed"))
}

// ─────────────────────────────── Reports ───────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricSummary {
    pub per_seed: Vec<f64>,
    pub mean: f64,
}

impl MetricSummary {
    pub fn from_values(per_seed: Vec<f64>) -> MetricSummary {
        let mean = per_seed.iter().sum::<f64>() / per_seed.len() as f64;
        MetricSummary { per_seed, mean }
    }
}

pub type TaskMetrics = BTreeMap<String, MetricSummary>;

/// `{task: {metric: {per_seed, mean}}}` — the probe run's full result.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Default)]
#[serde(transparent)]
pub struct BenchmarkReport {
    pub tasks: BTreeMap<String, TaskMetrics>,
}

impl BenchmarkReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Flat tab-separated rendering: task, metric, per-seed columns, mean.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("task\tmetric\tper_seed\tmean\n");
        for (task, metrics) in &self.tasks {
            for (metric, summary) in metrics {
                let seeds = summary
                    .per_seed
                    .iter()
                    .map(|v| format!("{v:.6}"))
                    .collect::<Vec<_>>()
                    .join(",");
                out.push_str(&format!("{task}\t{metric}\t{seeds}\t{:.6}\n", summary.mean));
            }
        }
        out
    }
}

// ───────────────────────────── Benchmark ───────────────────────────────

/// Per-task metric names beyond the headline one.
fn metric_set(kind: &TaskKind, preds: &[Vec<f64>], targets: &[Target]) -> Result<Vec<(String, f64)>, ProbeError> {
    match kind {
        TaskKind::SingleLabel { .. } => {
            Ok(vec![("accuracy".into(), task_metric(kind, preds, targets)?)])
        }
        TaskKind::MultiLabel { .. } => {
            let truth: Vec<Vec<bool>> = targets
                .iter()
                .map(|t| match t {
                    Target::MultiHot(h) => h.clone(),
                    _ => unreachable!(),
                })
                .collect();
            Ok(vec![
                ("roc_auc".into(), metrics::roc_auc_macro(preds, &truth)?.mean),
                ("pr_auc".into(), metrics::pr_auc_macro(preds, &truth)?.mean),
            ])
        }
        TaskKind::Regression { .. } => {
            Ok(vec![("r_squared".into(), task_metric(kind, preds, targets)?)])
        }
    }
}

/// Run the full protocol for each task: train probes on frozen features
/// (per-seed), evaluate each on the test split with clip averaging, and
/// aggregate across seeds. Epoch crop features are cached and reused
/// across tasks, since the crop stream does not depend on the task.
pub fn run_benchmark(
    backbone: &AudioBackbone,
    corpus: &LoadedCorpus,
    tasks: &[TaskName],
    cfg: &ProbeConfig,
) -> Result<BenchmarkReport, ProbeError> {
    cfg.validate().map_err(contract)?;
    if tasks.is_empty() {
        return Err(contract("no tasks requested"));
    }
    let train_idx = corpus.split_indices("train");
    let val_idx = corpus.split_indices("val");
    let test_idx = corpus.split_indices("test");
    // Two tracks per held-out split is the floor for every metric here
    // (R² needs variance; AUC needs both classes a chance to appear).
    if train_idx.is_empty() || val_idx.len() < 2 || test_idx.len() < 2 {
        return Err(contract(format!(
            "probe runs need a train split plus at least two val and two test tracks; \
             got {} train, {} val, {} test",
            train_idx.len(),
            val_idx.len(),
            test_idx.len()
        )));
    }
    let val_feats: Vec<Vec<Vec<f64>>> = val_idx
        .iter()
        .map(|&i| track_features(backbone, &corpus.clips[i]))
        .collect::<Result<_, _>>()?;
    let test_feats: Vec<Vec<Vec<f64>>> = test_idx
        .iter()
        .map(|&i| track_features(backbone, &corpus.clips[i]))
        .collect::<Result<_, _>>()?;
    let mut crop_cache: HashMap<usize, Vec<Vec<f64>>> = HashMap::new();
    let dim = backbone.cfg.d;

    let mut report = BenchmarkReport::default();
    for &task in tasks {
        let (kind, all_targets) = targets_for(task, &corpus.entries)?;
        let pick = |idx: &[usize]| -> Vec<Target> {
            idx.iter().map(|&i| all_targets[i].clone()).collect()
        };
        let train_targets = pick(&train_idx);
        let val_targets = pick(&val_idx);
        let test_targets = pick(&test_idx);
        let outcomes = train_probes(
            dim,
            &kind,
            &train_targets,
            |epoch| {
                if let Some(hit) = crop_cache.get(&epoch) {
                    return Ok(hit.clone());
                }
                let feats = crop_features(backbone, corpus, &train_idx, epoch)?;
                crop_cache.insert(epoch, feats.clone());
                Ok(feats)
            },
            &val_feats,
            &val_targets,
            cfg,
        )?;
        let mut per_metric: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for outcome in &outcomes {
            let mut preds = Vec::with_capacity(test_feats.len());
            for clip_feats in &test_feats {
                preds.push(evaluate_track(&outcome.probe, clip_feats)?);
            }
            for (name, value) in metric_set(&kind, &preds, &test_targets)? {
                per_metric.entry(name).or_default().push(value);
            }
        }
        let summaries: TaskMetrics = per_metric
            .into_iter()
            .map(|(name, values)| (name, MetricSummary::from_values(values)))
            .collect();
        report.tasks.insert(task.as_str().to_string(), summaries);
    }
    Ok(report)
}

// ─────────────────────────────── Tests ─────────────────────────────────
