use super::{MetricsError, Result};
use crate::tensor::Tensor;

fn check_lengths(op: &'static str, left: usize, right: usize) -> Result<()> {
    if left == 0 {
        return Err(MetricsError::Empty(op));
    }
    if left != right {
        return Err(MetricsError::LengthMismatch { op, left, right });
    }
    Ok(())
}

pub fn accuracy(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths("accuracy", preds.len(), labels.len())?;
    let hits = preds.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Support-weighted mean of per-class F1; a class with `P + R = 0` scores 0.
pub fn weighted_f1(preds: &[usize], labels: &[usize]) -> Result<f64> {
    check_lengths("weighted_f1", preds.len(), labels.len())?;
    let classes = preds.iter().chain(labels).max().map_or(0, |&m| m + 1);
    let mut tp = vec![0usize; classes];
    let mut predicted = vec![0usize; classes];
    let mut support = vec![0usize; classes];
    for (&p, &y) in preds.iter().zip(labels) {
        predicted[p] += 1;
        support[y] += 1;
        if p == y {
            tp[y] += 1;
        }
    }
    let n = labels.len() as f64;
    let mut total = 0.0;
    for c in 0..classes {
        if support[c] == 0 {
            continue;
        }
        let precision = if predicted[c] > 0 {
            tp[c] as f64 / predicted[c] as f64
        } else {
            0.0
        };
        let recall = tp[c] as f64 / support[c] as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        total += support[c] as f64 / n * f1;
    }
    Ok(total)
}

/// Ranks starting at 1; tied values share their average rank.
fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = rank;
        }
        i = j + 1;
    }
    ranks
}

/// Support-weighted one-vs-rest ROC AUC over the score columns.
///
/// Classes absent from `labels` are dropped (logged at debug level) and the
/// remaining weights renormalised. Needs at least two present classes.
pub fn weighted_auc(scores: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, classes) = scores
        .dims2("weighted_auc")
        .map_err(|e| MetricsError::Invalid(e.to_string()))?;
    check_lengths("weighted_auc", n, labels.len())?;
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(MetricsError::Invalid(format!(
            "label {bad} has no score column"
        )));
    }
    let mut support = vec![0usize; classes];
    for &y in labels {
        support[y] += 1;
    }
    let present = support.iter().filter(|&&s| s > 0).count();
    if present < 2 {
        return Err(MetricsError::Invalid(format!(
            "weighted AUC needs at least two classes present, found {present}"
        )));
    }
    let absent: Vec<usize> = (0..classes).filter(|&c| support[c] == 0).collect();
    if !absent.is_empty() {
        log::debug!("weighted AUC: classes {absent:?} absent from labels, excluded");
    }
    let mut column = vec![0.0; n];
    let mut total = 0.0;
    for c in (0..classes).filter(|&c| support[c] > 0) {
        for (i, v) in column.iter_mut().enumerate() {
            *v = scores.get2(i, c);
        }
        let ranks = average_ranks(&column);
        let pos = support[c] as f64;
        let neg = n as f64 - pos;
        if neg == 0.0 {
            continue;
        }
        let rank_sum: f64 = labels
            .iter()
            .zip(&ranks)
            .filter(|(&y, _)| y == c)
            .map(|(_, r)| r)
            .sum();
        let auc = (rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg);
        total += pos / n as f64 * auc;
    }
    Ok(total)
}

/// The three per-split scores reported for each client.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassificationScores {
    pub accuracy: f64,
    pub weighted_auc: f64,
    pub weighted_f1: f64,
}

impl ClassificationScores {
    /// Scores from `logits`. AUC falls back to 0.5 when fewer than two
    /// classes are present, since it is undefined there.
    pub fn from_logits(logits: &Tensor, labels: &[usize]) -> Result<Self> {
        let preds = logits.argmax_rows();
        let probs = logits
            .softmax_rows()
            .map_err(|e| MetricsError::Invalid(e.to_string()))?;
        let distinct = {
            let mut seen = labels.to_vec();
            seen.sort_unstable();
            seen.dedup();
            seen.len()
        };
        let weighted_auc = if distinct >= 2 {
            weighted_auc(&probs, labels)?
        } else {
            0.5
        };
        Ok(Self {
            accuracy: accuracy(&preds, labels)?,
            weighted_auc,
            weighted_f1: weighted_f1(&preds, labels)?,
        })
    }
}
