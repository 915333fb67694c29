//! Pre-training objectives and the training loop.
//!
//! Three losses are computed over the joint (co-attended) states:
//!
//! * **MLM** — masked tokens are replaced by `[MASK]`; the text head
//!   predicts the original id from the joint text state at that position.
//! * **MAM** — masked audio feature rows are zeroed; the audio head
//!   regresses the original (detached) backbone feature from the joint
//!   audio state at that position.
//! * **ATM** — each caption is paired with its own audio or, with
//!   probability 0.5, the audio of another batch item; a scorer on the
//!   two summary states predicts whether the pair matches.
//!
//! Every item is corrupted the same way regardless of its pairing, so mask
//! presence says nothing about the match label; masked prediction is only
//! *scored* on matched pairs, since reconstructing against a swapped
//! caption is ill-posed. Mismatched items contribute to the match loss
//! alone.

use std::collections::HashMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::{AudioClip, AudioError};
use crate::model::MulapModel;
use crate::optim::{Adam, AdamConfig};
use crate::tensor::{Tensor, TensorError};
use crate::text::{CLS, MASK, PAD, SEP};

/// Fraction of positions hidden from each modality.
pub const DEFAULT_MASK_PROB: f64 = 0.15;
/// Fraction of batch items whose audio is swapped for a mismatch.
pub const NEGATIVE_PROB: f64 = 0.5;

#[derive(Debug, Error)]
pub enum PretrainError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Audio(#[from] AudioError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("pretrain: {0}")]
    Contract(String),
}

fn contract(msg: impl Into<String>) -> PretrainError {
    PretrainError::Contract(msg.into())
}

// ──────────────────────────── Configuration ────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub lr: f64,
    pub lambda_mlm: f64,
    pub lambda_mam: f64,
    pub lambda_atm: f64,
    pub p_mask: f64,
    pub seed: u64,
    /// Validation cadence, in steps.
    pub eval_every: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            steps: 1000,
            batch: 8,
            lr: 1e-4,
            lambda_mlm: 1.0,
            lambda_mam: 1.0,
            lambda_atm: 1.0,
            p_mask: DEFAULT_MASK_PROB,
            seed: 42,
            eval_every: 50,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.steps == 0 {
            return Err("steps must be positive".into());
        }
        if self.batch < 2 {
            return Err("batch must be at least 2 (in-batch negatives)".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err("lr must be positive and finite".into());
        }
        for (name, v) in
            [("lambda_mlm", self.lambda_mlm), ("lambda_mam", self.lambda_mam), ("lambda_atm", self.lambda_atm)]
        {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(format!("{name} must be finite and non-negative"));
            }
        }
        if self.lambda_mlm + self.lambda_mam + self.lambda_atm == 0.0 {
            return Err("at least one loss weight must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.p_mask) {
            return Err("p_mask must lie in [0, 1]".into());
        }
        if self.eval_every == 0 {
            return Err("eval_every must be positive".into());
        }
        Ok(())
    }
}

// ───────────────────────────── Masking ─────────────────────────────────

/// A token sequence with some positions replaced by `[MASK]`.
pub struct MaskedText {
    pub ids: Vec<usize>,
    /// `(position, original id)` in ascending position order.
    pub targets: Vec<(usize, usize)>,
}

/// Mask each real token independently with probability `p`; special ids
/// (CLS, SEP, PAD) are never touched. If chance selects nothing, one
/// eligible position is forced so every item contributes a target.
pub fn mask_text(ids: &[usize], p: f64, rng: &mut ChaCha8Rng) -> Result<MaskedText, TensorError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TensorError::InvalidArgument {
            op: "mask_text",
            detail: format!("mask probability {p} outside [0, 1]"),
        });
    }
    let eligible: Vec<usize> = (0..ids.len())
        .filter(|&i| ids[i] != CLS && ids[i] != SEP && ids[i] != PAD)
        .collect();
    if eligible.is_empty() {
        return Err(TensorError::InvalidArgument {
            op: "mask_text",
            detail: "no maskable tokens in sequence".into(),
        });
    }
    let mut out = ids.to_vec();
    let mut targets = Vec::new();
    for &i in &eligible {
        if rng.random::<f64>() < p {
            targets.push((i, ids[i]));
            out[i] = MASK;
        }
    }
    if targets.is_empty() {
        let i = eligible[rng.random_range(0..eligible.len())];
        targets.push((i, ids[i]));
        out[i] = MASK;
    }
    Ok(MaskedText { ids: out, targets })
}

/// An audio feature sequence with some rows zeroed.
pub struct MaskedAudio {
    /// `[T+1, d]` with masked rows multiplied by zero (graph-preserving).
    pub features: Tensor,
    /// Masked row indices, ascending, all in `1..=T`.
    pub positions: Vec<usize>,
    /// `[|M|, d]` constant snapshot of the original rows.
    pub targets: Tensor,
}

/// Mask feature rows `1..=T` independently with probability `p`; the
/// summary row 0 is never masked, and at least one row always is.
/// Regression targets are detached so the loss pulls the prediction
/// toward the feature, not the feature toward zero.
pub fn mask_audio(
    features_full: &Tensor,
    p: f64,
    rng: &mut ChaCha8Rng,
) -> Result<MaskedAudio, TensorError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(TensorError::InvalidArgument {
            op: "mask_audio",
            detail: format!("mask probability {p} outside [0, 1]"),
        });
    }
    if features_full.ndim() != 2 || features_full.rows() < 2 {
        return Err(TensorError::InvalidArgument {
            op: "mask_audio",
            detail: format!(
                "expected [T+1, d] with T >= 1, got {:?}",
                features_full.shape()
            ),
        });
    }
    let rows = features_full.rows();
    let cols = features_full.cols();
    let mut positions: Vec<usize> = (1..rows).filter(|_| rng.random::<f64>() < p).collect();
    if positions.is_empty() {
        positions.push(rng.random_range(1..rows));
    }
    let mut keep = vec![1.0; rows * cols];
    for &r in &positions {
        keep[r * cols..(r + 1) * cols].fill(0.0);
    }
    let mask = Tensor::from_vec(&[rows, cols], keep)?;
    let features = features_full.mul(&mask)?;
    let targets = features_full.detach().gather_rows(&positions)?;
    Ok(MaskedAudio { features, positions, targets })
}

/// For each batch item, decide which item's audio it is paired with.
/// Returns `(audio source index, matched)`. Each item keeps its own audio
/// with probability 0.5 and otherwise borrows a uniformly random *other*
/// item's; at least one item is always left matched so the masked losses
/// have something to train on.
pub fn sample_negatives(
    batch: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<(usize, bool)>, TensorError> {
    if batch == 0 {
        return Err(TensorError::InvalidArgument {
            op: "sample_negatives",
            detail: "empty batch".into(),
        });
    }
    let mut out = Vec::with_capacity(batch);
    for i in 0..batch {
        if rng.random::<f64>() < NEGATIVE_PROB {
            if batch == 1 {
                return Err(TensorError::InvalidArgument {
                    op: "sample_negatives",
                    detail: "cannot draw a mismatched pair from a batch of one".into(),
                });
            }
            let j = rng.random_range(0..batch - 1);
            out.push((if j >= i { j + 1 } else { j }, false));
        } else {
            out.push((i, true));
        }
    }
    if out.iter().all(|&(_, matched)| !matched) {
        let k = rng.random_range(0..batch);
        out[k] = (k, true);
    }
    Ok(out)
}

// ─────────────────────────────── Losses ────────────────────────────────

/// One batch item after masking, ready for the forward pass.
pub struct PreparedItem {
    pub audio: MaskedAudio,
    pub ids: Vec<usize>,
    /// `(position, original id)` MLM targets; empty for mismatched items.
    pub text_targets: Vec<(usize, usize)>,
    pub matched: bool,
}

/// Per-component loss values of one step, as plain numbers for logging.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLosses {
    pub total: f64,
    pub mlm: f64,
    pub mam: f64,
    pub atm: f64,
}

/// Mean cross-entropy over every masked token position in the batch.
pub fn mlm_loss(
    model: &MulapModel,
    states: &[crate::coattention::JointStates],
    items: &[PreparedItem],
) -> Result<Option<Tensor>, TensorError> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (js, item) in states.iter().zip(items) {
        if item.text_targets.is_empty() {
            continue;
        }
        let positions: Vec<usize> = item.text_targets.iter().map(|&(p, _)| p).collect();
        rows.push(js.text.gather_rows(&positions)?);
        targets.extend(item.text_targets.iter().map(|&(_, id)| id));
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let gathered = Tensor::concat_rows(&rows)?;
    let logits = model.heads.mlm.forward(&gathered)?;
    Ok(Some(logits.cross_entropy(&targets)?))
}

/// Squared-error feature regression, averaged over masked rows: the sum
/// of per-row squared L2 distances divided by the number of masked rows.
pub fn mam_loss(
    model: &MulapModel,
    states: &[crate::coattention::JointStates],
    items: &[PreparedItem],
) -> Result<Option<Tensor>, TensorError> {
    let mut rows = Vec::new();
    let mut targets = Vec::new();
    for (js, item) in states.iter().zip(items) {
        if !item.matched {
            continue;
        }
        rows.push(js.audio.gather_rows(&item.audio.positions)?);
        targets.push(item.audio.targets.clone());
    }
    if rows.is_empty() {
        return Ok(None);
    }
    let gathered = Tensor::concat_rows(&rows)?;
    let target = Tensor::concat_rows(&targets)?;
    let pred = model.heads.mam.forward(&gathered)?;
    let diff = pred.sub(&target)?;
    let n_rows = gathered.rows() as f64;
    diff.mul(&diff)?.sum_all()?.scale(1.0 / n_rows).map(Some)
}

/// Match probability for one item: a scorer over the elementwise product
/// of the two summary states.
pub fn atm_score(
    model: &MulapModel,
    js: &crate::coattention::JointStates,
) -> Result<Tensor, TensorError> {
    let joint = js.h0_audio()?.mul(&js.h0_text()?)?;
    model.heads.atm.forward(&joint)?.sigmoid()
}

/// Mean binary cross-entropy of the match scores against the pairing
/// labels.
pub fn atm_loss(
    model: &MulapModel,
    states: &[crate::coattention::JointStates],
    items: &[PreparedItem],
) -> Result<Tensor, TensorError> {
    let mut probs = Vec::with_capacity(states.len());
    let mut labels = Vec::with_capacity(states.len());
    for (js, item) in states.iter().zip(items) {
        probs.push(atm_score(model, js)?);
        labels.push(if item.matched { 1.0 } else { 0.0 });
    }
    Tensor::concat_rows(&probs)?.bce_from_prob(&labels)
}

/// Weighted total with per-component values for logging. Absent
/// components (no contributing items) count as zero.
pub fn total_loss(
    mlm: Option<Tensor>,
    mam: Option<Tensor>,
    atm: Tensor,
    cfg: &PretrainConfig,
) -> Result<(Tensor, StepLosses), TensorError> {
    let mlm_v = mlm.as_ref().map_or(0.0, Tensor::item);
    let mam_v = mam.as_ref().map_or(0.0, Tensor::item);
    let atm_v = atm.item();
    let mut total = atm.scale(cfg.lambda_atm)?;
    if let Some(t) = mlm {
        total = total.add(&t.scale(cfg.lambda_mlm)?)?;
    }
    if let Some(t) = mam {
        total = total.add(&t.scale(cfg.lambda_mam)?)?;
    }
    let losses = StepLosses { total: total.item(), mlm: mlm_v, mam: mam_v, atm: atm_v };
    Ok((total, losses))
}

// ──────────────────────────── Batch assembly ───────────────────────────

/// One audio–caption pair as fed to the trainer.
#[derive(Clone)]
pub struct PretrainItem {
    pub clip: AudioClip,
    pub ids: Vec<usize>,
}

/// Pair and mask one batch given already-extracted `[T+1, d]` feature
/// matrices (one per source item).
fn assemble_batch(
    features: &HashMap<usize, Tensor>,
    ids: &[Vec<usize>],
    assignment: &[(usize, bool)],
    p_mask: f64,
    rng_mask: &mut ChaCha8Rng,
) -> Result<Vec<PreparedItem>, PretrainError> {
    let mut out = Vec::with_capacity(assignment.len());
    for (i, &(src, matched)) in assignment.iter().enumerate() {
        // Corruption is applied to every item, matched or not, so the match
        // head cannot read the pairing label off mask presence. Only the
        // masked-loss *targets* are dropped for mismatched items, where
        // predicting against a swapped caption is ill-posed.
        let text = mask_text(&ids[i], p_mask, rng_mask)?;
        let mut audio = mask_audio(&features[&src], p_mask, rng_mask)?;
        let text_targets = if matched { text.targets } else { Vec::new() };
        if !matched {
            audio.positions = Vec::new();
            audio.targets = Tensor::zeros(&[0, audio.features.cols()]);
        }
        out.push(PreparedItem { audio, ids: text.ids, text_targets, matched });
    }
    Ok(out)
}

/// Encode, pair, and mask one batch. Feature extraction runs once per
/// distinct source track even when a track serves several items.
pub fn prepare_batch(
    model: &MulapModel,
    items: &[PretrainItem],
    p_mask: f64,
    rng_mask: &mut ChaCha8Rng,
    rng_pair: &mut ChaCha8Rng,
) -> Result<Vec<PreparedItem>, PretrainError> {
    let assignment = sample_negatives(items.len(), rng_pair)?;
    let mut features: HashMap<usize, Tensor> = HashMap::new();
    for &(src, _) in &assignment {
        if !features.contains_key(&src) {
            let full = model.backbone.encode_track(&items[src].clip).map_err(|e| match e {
                crate::backbone::BackboneError::Audio(a) => PretrainError::Audio(a),
                crate::backbone::BackboneError::Tensor(t) => PretrainError::Tensor(t),
            })?;
            features.insert(src, full.full()?);
        }
    }
    let ids: Vec<Vec<usize>> = items.iter().map(|it| it.ids.clone()).collect();
    assemble_batch(&features, &ids, &assignment, p_mask, rng_mask)
}

/// Like [`prepare_batch`], but starting from raw `[T+1, d]` feature
/// matrices instead of audio clips. Gradient checks use this to isolate
/// the joint transformer (smooth everywhere) from the convolutional
/// front end (max-pool and ReLU kinks make finite differences unreliable
/// at full scale).
pub fn prepare_batch_from_features(
    features: &[Tensor],
    ids: &[Vec<usize>],
    p_mask: f64,
    rng_mask: &mut ChaCha8Rng,
    rng_pair: &mut ChaCha8Rng,
) -> Result<Vec<PreparedItem>, PretrainError> {
    if features.len() != ids.len() {
        return Err(contract(format!(
            "{} feature matrices for {} id sequences",
            features.len(),
            ids.len()
        )));
    }
    let assignment = sample_negatives(features.len(), rng_pair)?;
    let by_source: HashMap<usize, Tensor> =
        features.iter().enumerate().map(|(i, f)| (i, f.clone())).collect();
    assemble_batch(&by_source, ids, &assignment, p_mask, rng_mask)
}

/// Forward every prepared item and combine the three losses.
pub fn batch_losses(
    model: &MulapModel,
    prepared: &[PreparedItem],
    cfg: &PretrainConfig,
) -> Result<(Tensor, StepLosses), PretrainError> {
    let mut states = Vec::with_capacity(prepared.len());
    for item in prepared {
        states.push(model.forward(&item.audio.features, &item.ids)?);
    }
    let mlm = mlm_loss(model, &states, prepared)?;
    let mam = mam_loss(model, &states, prepared)?;
    let atm = atm_loss(model, &states, prepared)?;
    Ok(total_loss(mlm, mam, atm, cfg)?)
}

/// One optimization step over `batch`: mask, forward, backward, update.
pub fn pretrain_step(
    model: &MulapModel,
    params: &[(String, Tensor)],
    opt: &mut Adam,
    batch: &[PretrainItem],
    cfg: &PretrainConfig,
    step: u64,
) -> Result<StepLosses, PretrainError> {
    let mut rng_mask = crate::rng::stream(cfg.seed, "mask", step);
    let mut rng_pair = crate::rng::stream(cfg.seed, "atm", step);
    let prepared = prepare_batch(model, batch, cfg.p_mask, &mut rng_mask, &mut rng_pair)?;
    let (loss, values) = batch_losses(model, &prepared, cfg)?;
    loss.backward()?;
    opt.step(params)?;
    Ok(values)
}

// ─────────────────────────── Validation pass ───────────────────────────

/// Loss over a held-out set with frozen masks and pairings: item `i`
/// always draws its masks from the same stream, so successive
/// evaluations are comparable point for point.
pub fn val_losses(
    model: &MulapModel,
    items: &[PretrainItem],
    cfg: &PretrainConfig,
) -> Result<StepLosses, PretrainError> {
    if items.is_empty() {
        return Err(contract("validation set is empty"));
    }
    let assignment = if items.len() == 1 {
        vec![(0usize, true)]
    } else {
        sample_negatives(items.len(), &mut crate::rng::stream(cfg.seed, "val-atm", 0))?
    };
    // Weighted accumulators: component sums over contributing rows.
    let (mut mlm_sum, mut mlm_rows) = (0.0f64, 0usize);
    let (mut mam_sum, mut mam_rows) = (0.0f64, 0usize);
    let mut atm_sum = 0.0f64;
    for (i, &(src, matched)) in assignment.iter().enumerate() {
        let mut rng = crate::rng::stream(cfg.seed, "val-mask", i as u64);
        let full = model.backbone.encode_track(&items[src].clip).map_err(|e| match e {
            crate::backbone::BackboneError::Audio(a) => PretrainError::Audio(a),
            crate::backbone::BackboneError::Tensor(t) => PretrainError::Tensor(t),
        })?.full()?;
        let text = mask_text(&items[i].ids, cfg.p_mask, &mut rng)?;
        let mut audio = mask_audio(&full, cfg.p_mask, &mut rng)?;
        let text_targets = if matched { text.targets } else { Vec::new() };
        if !matched {
            audio.positions = Vec::new();
            audio.targets = Tensor::zeros(&[0, audio.features.cols()]);
        }
        let prepared = PreparedItem { audio, ids: text.ids, text_targets, matched };
        let one = std::slice::from_ref(&prepared);
        let js = model.forward(&prepared.audio.features, &prepared.ids)?;
        let states = vec![js];
        if let Some(t) = mlm_loss(model, &states, one)? {
            mlm_sum += t.item() * prepared.text_targets.len() as f64;
            mlm_rows += prepared.text_targets.len();
        }
        if let Some(t) = mam_loss(model, &states, one)? {
            mam_sum += t.item() * prepared.audio.positions.len() as f64;
            mam_rows += prepared.audio.positions.len();
        }
        atm_sum += atm_loss(model, &states, one)?.item();
    }
    let mlm = if mlm_rows > 0 { mlm_sum / mlm_rows as f64 } else { 0.0 };
    let mam = if mam_rows > 0 { mam_sum / mam_rows as f64 } else { 0.0 };
    let atm = atm_sum / assignment.len() as f64;
    Ok(StepLosses {
        total: cfg.lambda_mlm * mlm + cfg.lambda_mam * mam + cfg.lambda_atm * atm,
        mlm,
        mam,
        atm,
    })
}

/// Match accuracy on deterministic pairs: every item once with its own
/// audio (label 1) and once with its neighbor's (label 0).
pub fn atm_accuracy(model: &MulapModel, items: &[PretrainItem]) -> Result<f64, PretrainError> {
    if items.len() < 2 {
        return Err(contract("match evaluation needs at least two items"));
    }
    let mut correct = 0usize;
    let mut total = 0usize;
    let full_of = |idx: usize| -> Result<Tensor, PretrainError> {
        let sf = model.backbone.encode_track(&items[idx].clip).map_err(|e| match e {
            crate::backbone::BackboneError::Audio(a) => PretrainError::Audio(a),
            crate::backbone::BackboneError::Tensor(t) => PretrainError::Tensor(t),
        })?;
        Ok(sf.full()?)
    };
    for i in 0..items.len() {
        let own = full_of(i)?;
        let other = full_of((i + 1) % items.len())?;
        for (full, label) in [(&own, 1.0), (&other, 0.0)] {
            let js = model.forward(full, &items[i].ids)?;
            let p = atm_score(model, &js)?.item();
            if (p >= 0.5) == (label == 1.0) {
                correct += 1;
            }
            total += 1;
        }
    }
    Ok(correct as f64 / total as f64)
}

// ───────────────────────────── Training loop ───────────────────────────

/// Parameter values at the best validation point, for checkpointing.
pub struct BestSnapshot {
    pub step: usize,
    pub val_total: f64,
    pub params: Vec<(String, Vec<usize>, Vec<f64>)>,
}

pub struct PretrainOutcome {
    pub steps_run: usize,
    pub final_losses: StepLosses,
    pub best: Option<BestSnapshot>,
    /// The optimizer in its final state, so a checkpoint written from
    /// the outcome can resume training exactly.
    pub optimizer: Adam,
}

fn fmt_losses(l: &StepLosses) -> String {
    format!("{:.6}\t{:.6}\t{:.6}\t{:.6}", l.total, l.mlm, l.mam, l.atm)
}

/// Run the full loop: shuffled batches, one Adam update per step, a
/// validation pass every `eval_every` steps. The log is deterministic —
/// identical configuration and data give byte-identical output; timing
/// never enters it.
pub fn pretrain(
    model: &MulapModel,
    train: &[PretrainItem],
    val: &[PretrainItem],
    cfg: &PretrainConfig,
    log: &mut dyn Write,
) -> Result<PretrainOutcome, PretrainError> {
    cfg.validate().map_err(contract)?;
    if train.len() < cfg.batch {
        return Err(contract(format!(
            "training set has {} items, smaller than batch size {}",
            train.len(),
            cfg.batch
        )));
    }
    let params = model.params();
    let mut opt = Adam::new(AdamConfig { lr: cfg.lr, ..Default::default() });
    writeln!(log, "step\tsplit\ttotal\tmlm\tmam\tatm")?;

    let mut deck: Vec<usize> = Vec::new();
    let mut epoch = 0u64;
    let mut last = StepLosses { total: 0.0, mlm: 0.0, mam: 0.0, atm: 0.0 };
    let mut best: Option<BestSnapshot> = None;
    for step in 1..=cfg.steps {
        if deck.len() < cfg.batch {
            deck = (0..train.len()).collect();
            deck.shuffle(&mut crate::rng::stream(cfg.seed, "batch-order", epoch));
            epoch += 1;
        }
        let batch: Vec<PretrainItem> =
            deck.drain(..cfg.batch).map(|i| train[i].clone()).collect();
        last = pretrain_step(model, &params, &mut opt, &batch, cfg, step as u64)?;
        writeln!(log, "{step}\ttrain\t{}", fmt_losses(&last))?;
        if step % cfg.eval_every == 0 && !val.is_empty() {
            let v = val_losses(model, val, cfg)?;
            writeln!(log, "{step}\tval\t{}", fmt_losses(&v))?;
            if best.as_ref().map_or(true, |b| v.total < b.val_total) {
                best = Some(BestSnapshot {
                    step,
                    val_total: v.total,
                    params: params
                        .iter()
                        .map(|(n, p)| (n.clone(), p.shape().to_vec(), p.data_vec()))
                        .collect(),
                });
            }
        }
    }
    Ok(PretrainOutcome { steps_run: cfg.steps, final_losses: last, best, optimizer: opt })
}

// ─────────────────────────────── Tests ─────────────────────────────────
