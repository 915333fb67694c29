//! Evaluation metrics with brute-force-verifiable semantics.
//!
//! ROC-AUC is the probability that a positive outranks a negative (ties
//! credited one half), computed through mid-ranks. PR-AUC is
//! non-interpolated average precision with tied scores folded into one
//! threshold. R² is the classic 1 − SS_res/SS_tot. Multi-label variants
//! macro-average over labels, skipping (and reporting) labels that have
//! only one class in the ground truth.

use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("{op}: empty input")]
    Empty { op: &'static str },
    #[error("{op}: {a} predictions vs {b} truths")]
    LengthMismatch { op: &'static str, a: usize, b: usize },
    #[error("{op}: {detail}")]
    Degenerate { op: &'static str, detail: String },
    #[error("{op}: {detail}")]
    InvalidValue { op: &'static str, detail: String },
}

fn check_scores(op: &'static str, scores: &[f64]) -> Result<(), MetricError> {
    if let Some(bad) = scores.iter().find(|v| !v.is_finite()) {
        return Err(MetricError::InvalidValue { op, detail: format!("non-finite score {bad}") });
    }
    Ok(())
}

// ──────────────────────────── Classification ───────────────────────────

/// Exact-match fraction.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch { op: "accuracy", a: pred.len(), b: truth.len() });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty { op: "accuracy" });
    }
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Ascending 1-based ranks with ties sharing their mid-rank.
fn mid_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Positions i..=j (0-based) share the average of ranks i+1..=j+1.
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive scores above a random negative,
/// with ties worth one half. Needs both classes present.
pub fn roc_auc(scores: &[f64], truths: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != truths.len() {
        return Err(MetricError::LengthMismatch { op: "roc_auc", a: scores.len(), b: truths.len() });
    }
    if scores.is_empty() {
        return Err(MetricError::Empty { op: "roc_auc" });
    }
    check_scores("roc_auc", scores)?;
    let n_pos = truths.iter().filter(|&&t| t).count();
    let n_neg = truths.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(MetricError::Degenerate {
            op: "roc_auc",
            detail: format!("{n_pos} positives, {n_neg} negatives"),
        });
    }
    let ranks = mid_ranks(scores);
    let pos_rank_sum: f64 =
        ranks.iter().zip(truths).filter_map(|(&r, &t)| t.then_some(r)).sum();
    Ok((pos_rank_sum - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Non-interpolated average precision. Tied scores form a single
/// threshold: precision is taken after the whole group is admitted.
pub fn average_precision(scores: &[f64], truths: &[bool]) -> Result<f64, MetricError> {
    if scores.len() != truths.len() {
        return Err(MetricError::LengthMismatch {
            op: "average_precision",
            a: scores.len(),
            b: truths.len(),
        });
    }
    if scores.is_empty() {
        return Err(MetricError::Empty { op: "average_precision" });
    }
    check_scores("average_precision", scores)?;
    let n_pos = truths.iter().filter(|&&t| t).count();
    if n_pos == 0 {
        return Err(MetricError::Degenerate {
            op: "average_precision",
            detail: "no positive items".into(),
        });
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut ap = 0.0;
    let mut tp = 0usize;
    let mut seen = 0usize;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let group_tp = order[i..=j].iter().filter(|&&k| truths[k]).count();
        tp += group_tp;
        seen += j - i + 1;
        if group_tp > 0 {
            let precision = tp as f64 / seen as f64;
            ap += precision * group_tp as f64 / n_pos as f64;
        }
        i = j + 1;
    }
    Ok(ap)
}

/// Per-label results of a macro-averaged AUC. Labels whose ground truth
/// is single-class are skipped (`None`) and excluded from the mean.
#[derive(Debug, Clone, PartialEq)]
pub struct MacroReport {
    pub mean: f64,
    pub per_label: Vec<Option<f64>>,
}

impl MacroReport {
    pub fn skipped(&self) -> Vec<usize> {
        self.per_label
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.is_none().then_some(i))
            .collect()
    }
}

fn macro_over_labels(
    op: &'static str,
    scores: &[Vec<f64>],
    truths: &[Vec<bool>],
    per_label: impl Fn(&[f64], &[bool]) -> Result<f64, MetricError>,
) -> Result<MacroReport, MetricError> {
    if scores.len() != truths.len() {
        return Err(MetricError::LengthMismatch { op, a: scores.len(), b: truths.len() });
    }
    if scores.is_empty() {
        return Err(MetricError::Empty { op });
    }
    let n_labels = scores[0].len();
    if n_labels == 0
        || scores.iter().any(|s| s.len() != n_labels)
        || truths.iter().any(|t| t.len() != n_labels)
    {
        return Err(MetricError::InvalidValue {
            op,
            detail: "ragged or empty label dimension".into(),
        });
    }
    let mut per = Vec::with_capacity(n_labels);
    let mut kept = Vec::new();
    for j in 0..n_labels {
        let col_scores: Vec<f64> = scores.iter().map(|s| s[j]).collect();
        let col_truths: Vec<bool> = truths.iter().map(|t| t[j]).collect();
        match per_label(&col_scores, &col_truths) {
            Ok(v) => {
                kept.push(v);
                per.push(Some(v));
            }
            Err(MetricError::Degenerate { .. }) => per.push(None),
            Err(e) => return Err(e),
        }
    }
    if kept.is_empty() {
        return Err(MetricError::Degenerate {
            op,
            detail: "every label is single-class".into(),
        });
    }
    Ok(MacroReport { mean: kept.iter().sum::<f64>() / kept.len() as f64, per_label: per })
}

/// Macro ROC-AUC over labels; single-class labels are skipped.
pub fn roc_auc_macro(
    scores: &[Vec<f64>],
    truths: &[Vec<bool>],
) -> Result<MacroReport, MetricError> {
    macro_over_labels("roc_auc_macro", scores, truths, roc_auc)
}

/// Macro average precision over labels; positive-free labels are skipped.
pub fn pr_auc_macro(
    scores: &[Vec<f64>],
    truths: &[Vec<bool>],
) -> Result<MacroReport, MetricError> {
    macro_over_labels("pr_auc_macro", scores, truths, average_precision)
}

// ────────────────────────────── Regression ─────────────────────────────

/// Coefficient of determination, `1 - SS_res / SS_tot`.
pub fn r_squared(pred: &[f64], truth: &[f64]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch { op: "r_squared", a: pred.len(), b: truth.len() });
    }
    if pred.len() < 2 {
        return Err(MetricError::Empty { op: "r_squared" });
    }
    check_scores("r_squared", pred)?;
    check_scores("r_squared", truth)?;
    let mean = truth.iter().sum::<f64>() / truth.len() as f64;
    let ss_tot: f64 = truth.iter().map(|t| (t - mean) * (t - mean)).sum();
    if ss_tot == 0.0 {
        return Err(MetricError::Degenerate {
            op: "r_squared",
            detail: "ground truth has zero variance".into(),
        });
    }
    let ss_res: f64 = pred.iter().zip(truth).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok(1.0 - ss_res / ss_tot)
}

/// Mean of per-dimension R² for vector targets.
pub fn r_squared_multi(pred: &[Vec<f64>], truth: &[Vec<f64>]) -> Result<f64, MetricError> {
    if pred.len() != truth.len() {
        return Err(MetricError::LengthMismatch {
            op: "r_squared_multi",
            a: pred.len(),
            b: truth.len(),
        });
    }
    if pred.is_empty() {
        return Err(MetricError::Empty { op: "r_squared_multi" });
    }
    let dims = pred[0].len();
    if dims == 0 || pred.iter().any(|p| p.len() != dims) || truth.iter().any(|t| t.len() != dims) {
        return Err(MetricError::InvalidValue {
            op: "r_squared_multi",
            detail: "ragged or empty target dimension".into(),
        });
    }
    let mut sum = 0.0;
    for d in 0..dims {
        let p: Vec<f64> = pred.iter().map(|v| v[d]).collect();
        let t: Vec<f64> = truth.iter().map(|v| v[d]).collect();
        sum += r_squared(&p, &t)?;
    }
    Ok(sum / dims as f64)
}

// ─────────────────────────────── Tests ─────────────────────────────────
