use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::scalar::Scalar;

use super::TrainError;

/// Classification metrics on a held-out split. The binary-only entries are
/// `None` for multiclass tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    pub macro_f1: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub sensitivity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub specificity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

fn check(pred_len: usize, labels: &[usize]) -> Result<(), TrainError> {
    if labels.is_empty() {
        return Err(TrainError::Metric("no samples".into()));
    }
    if pred_len != labels.len() {
        return Err(TrainError::Metric(format!(
            "{pred_len} predictions for {} labels",
            labels.len()
        )));
    }
    Ok(())
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> Result<f64, TrainError> {
    check(pred.len(), labels)?;
    let hits = pred.iter().zip(labels).filter(|(p, y)| p == y).count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Unweighted mean of per-class F1 over classes that occur in the labels or
/// the predictions.
pub fn macro_f1(pred: &[usize], labels: &[usize], classes: usize) -> Result<f64, TrainError> {
    check(pred.len(), labels)?;
    let mut f1 = Vec::new();
    for c in 0..classes {
        let tp = pred.iter().zip(labels).filter(|&(&p, &y)| p == c && y == c).count();
        let fp = pred.iter().zip(labels).filter(|&(&p, &y)| p == c && y != c).count();
        let fneg = pred.iter().zip(labels).filter(|&(&p, &y)| p != c && y == c).count();
        if tp + fp + fneg > 0 {
            f1.push(2.0 * tp as f64 / (2 * tp + fp + fneg) as f64);
        }
    }
    Ok(f1.iter().sum::<f64>() / f1.len() as f64)
}

fn require_binary(labels: &[usize], what: &str) -> Result<(), TrainError> {
    if labels.iter().any(|&y| y > 1) {
        return Err(TrainError::Metric(format!("{what} needs binary labels")));
    }
    Ok(())
}

/// `(sensitivity, specificity)` with class 1 as positive.
pub fn sensitivity_specificity(pred: &[usize], labels: &[usize]) -> Result<(f64, f64), TrainError> {
    check(pred.len(), labels)?;
    require_binary(labels, "sensitivity/specificity")?;
    let count = |p: usize, y: usize| pred.iter().zip(labels).filter(|&(&a, &b)| a == p && b == y).count() as f64;
    let (tp, fneg, tn, fp) = (count(1, 1), count(0, 1), count(0, 0), count(1, 0));
    if tp + fneg == 0.0 || tn + fp == 0.0 {
        return Err(TrainError::Metric("both classes must be present".into()));
    }
    Ok((tp / (tp + fneg), tn / (tn + fp)))
}

/// Area under the ROC curve as the Mann-Whitney statistic, ties counted half.
pub fn auc(scores: &[f64], labels: &[usize]) -> Result<f64, TrainError> {
    check(scores.len(), labels)?;
    require_binary(labels, "AUC")?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = avg;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y == 1).count() as f64;
    let neg = labels.len() as f64 - pos;
    if pos == 0.0 || neg == 0.0 {
        return Err(TrainError::Metric("both classes must be present".into()));
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y == 1).map(|(r, _)| r).sum();
    Ok((rank_sum - pos * (pos + 1.0) / 2.0) / (pos * neg))
}

/// Row-wise argmax; the first maximum wins.
pub fn argmax_rows<S: Scalar>(logits: &Tensor<S>) -> Vec<usize> {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// All metrics from `(N, K)` logits. For `K = 2` the binary metrics are filled
/// in, with the softmax probability of class 1 as the AUC score.
pub fn evaluate<S: Scalar>(logits: &Tensor<S>, labels: &[usize]) -> Result<Metrics, TrainError> {
    if logits.rank() != 2 {
        return Err(TrainError::Metric(format!(
            "logits must be (N, K), got {:?}",
            logits.shape()
        )));
    }
    let k = logits.shape()[1];
    if labels.iter().any(|&y| y >= k) {
        return Err(TrainError::Metric(format!("label outside [0, {k})")));
    }
    let pred = argmax_rows(logits);
    let mut m = Metrics {
        accuracy: accuracy(&pred, labels)?,
        macro_f1: macro_f1(&pred, labels, k)?,
        sensitivity: None,
        specificity: None,
        auc: None,
    };
    if k == 2 {
        let (sen, spec) = sensitivity_specificity(&pred, labels)?;
        let scores: Vec<f64> = logits
            .data()
            .chunks(2)
            .map(|r| 1.0 / (1.0 + (r[0].as_f64() - r[1].as_f64()).exp()))
            .collect();
        m.sensitivity = Some(sen);
        m.specificity = Some(spec);
        m.auc = Some(auc(&scores, labels)?);
    }
    Ok(m)
}
