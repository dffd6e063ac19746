use serde::{Deserialize, Serialize};

use super::EvalError;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub auroc: f64,
}

pub fn accuracy(predictions: &[usize], labels: &[usize]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch(predictions.len(), labels.len()));
    }
    if labels.is_empty() {
        return Err(EvalError::UndefinedMetric("accuracy of an empty set".into()));
    }
    let hits = predictions.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Mann–Whitney AUROC: the probability that a random positive outscores a
/// random negative, counting ties as one half (average ranks).
pub fn auroc(scores: &[f64], labels: &[bool]) -> Result<f64, EvalError> {
    if scores.len() != labels.len() {
        return Err(EvalError::LengthMismatch(scores.len(), labels.len()));
    }
    let n_pos = labels.iter().filter(|&&l| l).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(EvalError::UndefinedMetric("AUROC needs both classes".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(EvalError::UndefinedMetric("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut pos_rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        pos_rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((pos_rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Macro one-vs-rest AUROC over the classes that have both positives and
/// negatives among `labels`. `probs` holds `num_classes` scores per sample.
pub fn macro_auroc(probs: &[f64], labels: &[usize], num_classes: usize) -> Result<f64, EvalError> {
    if probs.len() != labels.len() * num_classes {
        return Err(EvalError::LengthMismatch(probs.len(), labels.len() * num_classes));
    }
    let mut total = 0.0;
    let mut used = 0;
    for class in 0..num_classes {
        let bin: Vec<bool> = labels.iter().map(|&l| l == class).collect();
        if bin.iter().all(|&b| b) || !bin.iter().any(|&b| b) {
            continue;
        }
        let scores: Vec<f64> = probs.chunks(num_classes).map(|row| row[class]).collect();
        total += auroc(&scores, &bin)?;
        used += 1;
    }
    if used == 0 {
        return Err(EvalError::UndefinedMetric("AUROC needs at least two classes".into()));
    }
    Ok(total / used as f64)
}
