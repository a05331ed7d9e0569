//! Metrics against brute-force references on random prediction sets with
//! frequent ties.

use dualmar_core::metrics::{auc, binary_f1, recall_at_k, weighted_f1, MetricError, THRESHOLD};
use dualmar_core::rng::seeded;
use rand::Rng;

fn f1_from_pr(tp: f64, fp: f64, fn_: f64) -> f64 {
    let p = if tp + fp > 0.0 { tp / (tp + fp) } else { 0.0 };
    let r = if tp + fn_ > 0.0 { tp / (tp + fn_) } else { 0.0 };
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn ref_weighted_f1(preds: &[Vec<f64>], truths: &[Vec<f64>]) -> f64 {
    let w = truths[0].len();
    let mut scores = Vec::new();
    let mut weights = Vec::new();
    for j in 0..w {
        let col = |m: &[Vec<f64>]| m.iter().map(|r| r[j]).collect::<Vec<_>>();
        let (p, t) = (col(preds), col(truths));
        let tp = (0..p.len()).filter(|&i| p[i] >= THRESHOLD && t[i] == 1.0).count() as f64;
        let fp = (0..p.len()).filter(|&i| p[i] >= THRESHOLD && t[i] == 0.0).count() as f64;
        let fn_ = (0..p.len()).filter(|&i| p[i] < THRESHOLD && t[i] == 1.0).count() as f64;
        scores.push(f1_from_pr(tp, fp, fn_));
        weights.push(tp + fn_);
    }
    let total: f64 = weights.iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    scores.iter().zip(&weights).map(|(s, w)| s * w).sum::<f64>() / total
}

/// Label `j` is in the top `k` when fewer than `k` labels beat it, with
/// equal scores beaten by lower indices.
fn ref_recall(preds: &[Vec<f64>], truths: &[Vec<f64>], k: usize) -> Option<f64> {
    let mut vals = Vec::new();
    for (p, t) in preds.iter().zip(truths) {
        let pos: Vec<usize> = (0..t.len()).filter(|&j| t[j] == 1.0).collect();
        if pos.is_empty() {
            continue;
        }
        let in_top = |j: usize| (0..p.len()).filter(|&i| p[i] > p[j] || (p[i] == p[j] && i < j)).count() < k;
        vals.push(pos.iter().filter(|&&j| in_top(j)).count() as f64 / pos.len() as f64);
    }
    (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
}

/// Fraction of positive/negative pairs ordered correctly, ties half.
fn ref_auc(s: &[f64], y: &[f64]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for i in 0..s.len() {
        for j in 0..s.len() {
            if y[i] == 1.0 && y[j] == 0.0 {
                pairs += 1.0;
                num += if s[i] > s[j] {
                    1.0
                } else if s[i] == s[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}

fn random_set(seed: u64) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
    let mut rng = seeded(seed);
    let n = rng.random_range(1..=12);
    let w = rng.random_range(1..=25);
    let steps = rng.random_range(2..=10) as f64;
    let density = rng.random_range(0.0..0.6);
    let preds = (0..n)
        .map(|_| (0..w).map(|_| (rng.random_range(0.0..=1.0f64) * steps).round() / steps).collect())
        .collect();
    let truths = (0..n)
        .map(|_| (0..w).map(|_| if rng.random_bool(density) { 1.0 } else { 0.0 }).collect())
        .collect();
    (preds, truths)
}

#[test]
fn multilabel_metrics_match_reference() {
    for seed in 0..50 {
        let (p, t) = random_set(seed);
        let got = weighted_f1(&p, &t, THRESHOLD).unwrap();
        assert!((got - ref_weighted_f1(&p, &t)).abs() < 1e-12, "seed {seed}");
        for k in [1, 3, 10, 20] {
            match (recall_at_k(&p, &t, k), ref_recall(&p, &t, k)) {
                (Ok(a), Some(b)) => assert!((a - b).abs() < 1e-12, "seed {seed} k {k}"),
                (Err(MetricError::EmptyEvaluation), None) => {}
                (a, b) => panic!("seed {seed}: {a:?} vs {b:?}"),
            }
        }
    }
}

#[test]
fn binary_metrics_match_reference() {
    for seed in 0..50 {
        let (p, t) = random_set(1000 + seed);
        let s: Vec<f64> = p.iter().map(|r| r[0]).collect();
        let y: Vec<f64> = t.iter().map(|r| r[0]).collect();
        let got = auc(&s, &y).unwrap();
        match (got, ref_auc(&s, &y)) {
            (Some(a), Some(b)) => assert!((a - b).abs() < 1e-12, "seed {seed}"),
            (None, None) => {}
            (a, b) => panic!("seed {seed}: {a:?} vs {b:?}"),
        }
        let tp = (0..s.len()).filter(|&i| s[i] >= THRESHOLD && y[i] == 1.0).count() as f64;
        let fp = (0..s.len()).filter(|&i| s[i] >= THRESHOLD && y[i] == 0.0).count() as f64;
        let fn_ = (0..s.len()).filter(|&i| s[i] < THRESHOLD && y[i] == 1.0).count() as f64;
        assert!((binary_f1(&s, &y, THRESHOLD).unwrap() - f1_from_pr(tp, fp, fn_)).abs() < 1e-12);
    }
}
