use alloc::collections::BTreeSet;
use alloc::vec::Vec;

use super::{angular_unchecked, radial_unchecked, IdTriple, PolarTable, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DirectionMetrics {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
}

impl DirectionMetrics {
    fn from_ranks(ranks: &[f64]) -> Self {
        if ranks.is_empty() {
            return Self::default();
        }
        let n = ranks.len() as f64;
        let frac = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
        Self {
            mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / n,
            hits_at_1: frac(1.0),
            hits_at_3: frac(3.0),
            hits_at_10: frac(10.0),
        }
    }
}

/// Link-prediction summary. The top-level figures average head and tail
/// ranking; the per-direction figures are kept alongside.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RankingReport {
    pub mrr: f64,
    pub hits_at_1: f64,
    pub hits_at_3: f64,
    pub hits_at_10: f64,
    pub triples: usize,
    pub filtered: bool,
    pub tail: DirectionMetrics,
    pub head: DirectionMetrics,
}

/// Rank of the true candidate: one plus the number of strictly closer
/// candidates, plus half the number of other candidates at exactly the same
/// distance.
fn tie_rank(true_d: f64, others: impl Iterator<Item = f64>) -> f64 {
    let (mut less, mut equal) = (0usize, 0usize);
    for d in others {
        if d < true_d {
            less += 1;
        } else if d == true_d {
            equal += 1;
        }
    }
    less as f64 + 1.0 + equal as f64 / 2.0
}

/// Ranks every test triple's tail and head against all entities by
/// ascending distance. In filtered mode candidates forming another triple of
/// `known` are skipped.
pub fn evaluate_link_prediction(
    table: &PolarTable,
    known: &[IdTriple],
    test: &[IdTriple],
    lambda: f64,
    filtered: bool,
) -> Result<RankingReport> {
    for &t in test {
        table.check(t)?;
    }
    let known: BTreeSet<IdTriple> = known.iter().chain(test).copied().collect();
    let n = table.n_entities();
    let dist = |tr: IdTriple| radial_unchecked(table, tr) + lambda * angular_unchecked(table, tr);
    let mut tail_ranks = Vec::with_capacity(test.len());
    let mut head_ranks = Vec::with_capacity(test.len());
    for &(h, r, t) in test {
        let dt = dist((h, r, t));
        let others = (0..n)
            .filter(|&e| e != t && !(filtered && known.contains(&(h, r, e))))
            .map(|e| dist((h, r, e)));
        tail_ranks.push(tie_rank(dt, others));
        let others = (0..n)
            .filter(|&e| e != h && !(filtered && known.contains(&(e, r, t))))
            .map(|e| dist((e, r, t)));
        head_ranks.push(tie_rank(dt, others));
    }
    let all: Vec<f64> = tail_ranks.iter().chain(&head_ranks).copied().collect();
    let both = DirectionMetrics::from_ranks(&all);
    Ok(RankingReport {
        mrr: both.mrr,
        hits_at_1: both.hits_at_1,
        hits_at_3: both.hits_at_3,
        hits_at_10: both.hits_at_10,
        triples: test.len(),
        filtered,
        tail: DirectionMetrics::from_ranks(&tail_ranks),
        head: DirectionMetrics::from_ranks(&head_ranks),
    })
}

fn harmonic(n: usize) -> f64 {
    (1..=n).map(|i| 1.0 / i as f64).sum()
}

/// Expected MRR of a ranker that orders the candidates of every query
/// uniformly at random: the mean over queries of `H(N)/N` for `N`
/// candidates (the true entity included).
pub fn random_guess_mrr(n_entities: usize, known: &[IdTriple], test: &[IdTriple], filtered: bool) -> f64 {
    if test.is_empty() {
        return 0.0;
    }
    let known: BTreeSet<IdTriple> = known.iter().chain(test).copied().collect();
    let mut total = 0.0;
    for &(h, r, t) in test {
        let count = |pred: &dyn Fn(usize) -> bool| (0..n_entities).filter(|&e| pred(e)).count();
        let nt = 1 + count(&|e| e != t && !(filtered && known.contains(&(h, r, e))));
        let nh = 1 + count(&|e| e != h && !(filtered && known.contains(&(e, r, t))));
        total += harmonic(nt) / nt as f64 + harmonic(nh) / nh as f64;
    }
    total / (2 * test.len()) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Matrix;
    use alloc::vec;

    #[test]
    fn ranks_to_mrr() {
        let m = DirectionMetrics::from_ranks(&[1.0, 2.0, 4.0]);
        assert!((m.mrr - 0.5833333333333334).abs() < 1e-15);
        assert!((m.hits_at_1 - 1.0 / 3.0).abs() < 1e-15);
        assert!((m.hits_at_3 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(m.hits_at_10, 1.0);
    }

    #[test]
    fn ties_take_the_mean_rank() {
        assert_eq!(tie_rank(1.0, [0.5, 1.0, 1.0, 2.0].into_iter()), 3.0);
    }

    #[test]
    fn perfect_table() {
        // entity i has modulus i+1 in one dimension, relation modulus 1, phase 0:
        // d(h, r, t) = |h - t| so the true tail of (i, 0, i) is unique at zero,
        // but self triples are not allowed; use a shift relation instead.
        let ne = 4;
        let t = PolarTable {
            entity_modulus: Matrix::from_fn(ne, 1, |r, _| (1u64 << r) as f64),
            entity_phase: Matrix::zeros(ne, 1),
            relation_modulus: Matrix::filled(1, 1, 2.0),
            relation_phase: Matrix::zeros(1, 1),
        };
        let test = vec![(0, 0, 1), (1, 0, 2), (2, 0, 3)];
        let rep = evaluate_link_prediction(&t, &[], &test, 1.0, true).unwrap();
        assert_eq!(rep.mrr, 1.0);
        assert_eq!(rep.hits_at_1, 1.0);
    }

    #[test]
    fn random_guess_of_unfiltered_pair() {
        // 3 entities, no filtering: H(3)/3 for every query
        let r = random_guess_mrr(3, &[], &[(0, 0, 1)], false);
        assert!((r - (1.0 + 0.5 + 1.0 / 3.0) / 3.0).abs() < 1e-15);
    }
}
