//! Evaluation metrics: support-weighted F1 and recall@k for multi-label
//! diagnosis, rank AUC and F1 for binary prediction.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MetricError {
    #[error("nothing to evaluate")]
    EmptyEvaluation,
    #[error("prediction and truth shapes differ")]
    ShapeMismatch,
}

pub type Result<T> = core::result::Result<T, MetricError>;

pub const THRESHOLD: f64 = 0.5;

fn check(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<usize> {
    if preds.is_empty() {
        return Err(MetricError::EmptyEvaluation);
    }
    let w = truths[0].len();
    if preds.len() != truths.len() || preds.iter().chain(truths).any(|r| r.len() != w) {
        return Err(MetricError::ShapeMismatch);
    }
    Ok(w)
}

fn f1(tp: usize, fp: usize, fn_: usize) -> f64 {
    let d = 2 * tp + fp + fn_;
    if d == 0 {
        0.0
    } else {
        (2 * tp) as f64 / d as f64
    }
}

/// Per-label F1 at `threshold`, averaged with weights equal to each label's
/// positive count in the truth. Zero when no label has support.
pub fn weighted_f1(preds: &[Vec<f64>], truths: &[Vec<f64>], threshold: f64) -> Result<f64> {
    let w = check(preds, truths)?;
    let (mut num, mut support) = (0.0, 0usize);
    for j in 0..w {
        let (mut tp, mut fp, mut fn_) = (0, 0, 0);
        for (p, t) in preds.iter().zip(truths) {
            match (p[j] >= threshold, t[j] > 0.5) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        num += (tp + fn_) as f64 * f1(tp, fp, fn_);
        support += tp + fn_;
    }
    Ok(if support == 0 { 0.0 } else { num / support as f64 })
}

/// Indices of the `k` highest scores; equal scores favour the lower index.
pub fn top_k(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Mean over samples with a non-empty truth of `|top-k ∩ truth| / |truth|`.
pub fn recall_at_k(preds: &[Vec<f64>], truths: &[Vec<f64>], k: usize) -> Result<f64> {
    check(preds, truths)?;
    let (mut total, mut n) = (0.0, 0usize);
    for (p, t) in preds.iter().zip(truths) {
        let size = t.iter().filter(|&&y| y > 0.5).count();
        if size == 0 {
            continue;
        }
        let hits = top_k(p, k).into_iter().filter(|&j| t[j] > 0.5).count();
        total += hits as f64 / size as f64;
        n += 1;
    }
    if n == 0 {
        return Err(MetricError::EmptyEvaluation);
    }
    Ok(total / n as f64)
}

/// Expected recall@k of a uniformly random ranking over `n_labels`.
pub fn random_recall_at_k(n_labels: usize, k: usize) -> f64 {
    k.min(n_labels) as f64 / n_labels as f64
}

/// Rank-sum AUC with tied scores at their mean rank. `None` when either
/// class is absent.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<Option<f64>> {
    if scores.is_empty() {
        return Err(MetricError::EmptyEvaluation);
    }
    if scores.len() != labels.len() {
        return Err(MetricError::ShapeMismatch);
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = alloc::vec![0.0; scores.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = mean;
        }
        i = j + 1;
    }
    let pos = labels.iter().filter(|&&y| y > 0.5).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Ok(None);
    }
    let rank_sum: f64 = ranks.iter().zip(labels).filter(|(_, &y)| y > 0.5).map(|(r, _)| r).sum();
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(Some(u / (pos * neg) as f64))
}

pub fn binary_f1(scores: &[f64], labels: &[f64], threshold: f64) -> Result<f64> {
    if scores.is_empty() {
        return Err(MetricError::EmptyEvaluation);
    }
    if scores.len() != labels.len() {
        return Err(MetricError::ShapeMismatch);
    }
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y > 0.5) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    Ok(f1(tp, fp, fn_))
}

pub type MetricSet = BTreeMap<String, f64>;

/// `w_f1`, `recall_at_10`, `recall_at_20`. Recall is omitted when no sample
/// has a positive label.
pub fn diagnosis_metrics(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> Result<MetricSet> {
    let mut m = MetricSet::new();
    m.insert("w_f1".into(), weighted_f1(preds, truths, THRESHOLD)?);
    for k in [10, 20] {
        match recall_at_k(preds, truths, k) {
            Ok(r) => {
                m.insert(alloc::format!("recall_at_{k}"), r);
            }
            Err(MetricError::EmptyEvaluation) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(m)
}

/// `auc` (omitted when one class is missing) and `f1`.
pub fn hf_metrics(scores: &[f64], labels: &[f64]) -> Result<MetricSet> {
    let mut m = MetricSet::new();
    if let Some(a) = auc(scores, labels)? {
        m.insert("auc".into(), a);
    }
    m.insert("f1".into(), binary_f1(scores, labels, THRESHOLD)?);
    Ok(m)
}
