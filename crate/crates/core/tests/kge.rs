//! Polar embedding distances, loss values and link-prediction ranking
//! against exhaustive references.

use std::collections::BTreeSet;
use std::f64::consts::{PI, TAU};

use dualmar_core::kge::{
    angular_distance, evaluate_link_prediction, nll_loss, radial_distance, triple_distance, IdTriple, PolarTable,
};
use dualmar_core::nn::Matrix;
use dualmar_core::rng::seeded;
use proptest::prelude::*;
use rand::Rng;

fn pair(h_r: &[f64], r_r: &[f64], t_r: &[f64], h_a: &[f64], r_a: &[f64], t_a: &[f64]) -> PolarTable {
    let k = h_r.len();
    PolarTable {
        entity_modulus: Matrix::from_vec(2, k, [h_r, t_r].concat()).unwrap(),
        entity_phase: Matrix::from_vec(2, k, [h_a, t_a].concat()).unwrap(),
        relation_modulus: Matrix::from_vec(1, k, r_r.to_vec()).unwrap(),
        relation_phase: Matrix::from_vec(1, k, r_a.to_vec()).unwrap(),
    }
}

fn radial_only(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    let z = vec![0.0; h.len()];
    radial_distance(&pair(h, r, t, &z, &z, &z), (0, 0, 1)).unwrap()
}

fn angular_only(h: &[f64], r: &[f64], t: &[f64]) -> f64 {
    let z = vec![0.0; h.len()];
    angular_distance(&pair(&z, &z, &z, h, r, t), (0, 0, 1)).unwrap()
}

#[test]
fn radial_values() {
    assert!(radial_only(&[2.0, 3.0], &[2.0, 1.0], &[4.0, 3.0]).abs() < 1e-12);
    assert!((radial_only(&[1.0], &[2.0], &[5.0]) - 3.0).abs() < 1e-12);
    assert!((radial_only(&[1.0, 1.0], &[1.0, 1.0], &[0.0, 0.0]) - 2f64.sqrt()).abs() < 1e-12);
}

#[test]
fn angular_values() {
    assert!(angular_only(&[PI], &[PI], &[0.0]).abs() < 1e-12);
    assert!((angular_only(&[0.0], &[PI / 2.0], &[0.0]) - (PI / 4.0).sin()).abs() < 1e-12);
    assert!((angular_only(&[0.0], &[PI / 2.0], &[0.0]) - 0.7071067811865476).abs() < 1e-12);
}

#[test]
fn combined_distance_values() {
    let t = pair(&[1.0], &[1.0], &[1.0], &[0.5], &[0.25], &[0.75]);
    assert!(triple_distance(&t, (0, 0, 1), 3.0).unwrap().abs() < 1e-12);
    let t = pair(&[1.0, 2.0], &[0.5, 3.0], &[4.0, 1.0], &[0.3, 2.0], &[1.1, 0.4], &[5.0, 0.2]);
    let dr = radial_distance(&t, (0, 0, 1)).unwrap();
    assert_eq!(triple_distance(&t, (0, 0, 1), 0.0).unwrap(), dr);
    // d_r = 3 and d_a = 0.5 with λ = 2
    let t = pair(&[1.0], &[2.0], &[5.0], &[0.0], &[2.0 * 0.5f64.asin()], &[0.0]);
    assert!((angular_distance(&t, (0, 0, 1)).unwrap() - 0.5).abs() < 1e-12);
    assert!((triple_distance(&t, (0, 0, 1), 2.0).unwrap() - 4.0).abs() < 1e-12);
}

#[test]
fn loss_values() {
    let ln2 = 2f64.ln();
    for n in 0..5 {
        let gamma = 1.5 + n as f64;
        let negs = vec![gamma; n];
        assert!((nll_loss(gamma, &negs, gamma) - (1 + n) as f64 * ln2).abs() < 1e-12);
    }
    let expected = 2.0 * (1.0 + (-1.0f64).exp()).ln();
    assert!((nll_loss(0.0, &[2.0], 1.0) - expected).abs() < 1e-12);
    assert!((nll_loss(0.0, &[2.0], 1.0) - 0.6265233750364456).abs() < 1e-12);
    let small = nll_loss(0.0, &[1e6], 50.0);
    assert!(small > 0.0 && small < 1e-20);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn angular_distance_has_period_two_pi(
        k in 1usize..6,
        seed in any::<u64>(),
        slot in 0usize..3,
        turns in -5i32..=5,
    ) {
        let mut rng = seeded(seed);
        let mut v = |_: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-10.0..10.0)).collect() };
        let (h, r, t) = (v(0), v(1), v(2));
        let base = angular_only(&h, &r, &t);
        let mut parts = [h, r, t];
        let i = (seed as usize) % k;
        parts[slot][i] += TAU * turns as f64;
        let shifted = angular_only(&parts[0], &parts[1], &parts[2]);
        prop_assert!((base - shifted).abs() < 1e-12);
    }
}

/// Distance computed straight from the definition, without angle reduction.
fn reference_distance(t: &PolarTable, (h, r, tl): IdTriple, lambda: f64) -> f64 {
    let k = t.k();
    let mut sq = 0.0;
    let mut ang = 0.0;
    for i in 0..k {
        let e = t.entity_modulus.get(h, i) * t.relation_modulus.get(r, i) - t.entity_modulus.get(tl, i);
        sq += e * e;
        let d = t.entity_phase.get(h, i) + t.relation_phase.get(r, i) - t.entity_phase.get(tl, i);
        ang += (d / 2.0).sin().abs();
    }
    sq.sqrt() + lambda * ang
}

/// Sorts every candidate by distance and averages the 1-based positions of
/// all candidates tied with the true one.
fn reference_rank(scored: &mut Vec<(f64, bool)>) -> f64 {
    scored.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    let d = scored.iter().find(|c| c.1).unwrap().0;
    let pos: Vec<usize> = (0..scored.len()).filter(|&i| scored[i].0 == d).collect();
    pos.iter().map(|&p| (p + 1) as f64).sum::<f64>() / pos.len() as f64
}

struct Reference {
    mrr: f64,
    hits: [f64; 3],
}

fn reference_eval(t: &PolarTable, known: &[IdTriple], test: &[IdTriple], lambda: f64, filtered: bool) -> Reference {
    let all: BTreeSet<IdTriple> = known.iter().chain(test).copied().collect();
    let n = t.n_entities();
    let mut ranks = Vec::new();
    for &(h, r, tl) in test {
        let mut tail: Vec<(f64, bool)> = Vec::new();
        let mut head: Vec<(f64, bool)> = Vec::new();
        for e in 0..n {
            if e == tl || !(filtered && all.contains(&(h, r, e))) {
                tail.push((reference_distance(t, (h, r, e), lambda), e == tl));
            }
            if e == h || !(filtered && all.contains(&(e, r, tl))) {
                head.push((reference_distance(t, (e, r, tl), lambda), e == h));
            }
        }
        ranks.push(reference_rank(&mut tail));
        ranks.push(reference_rank(&mut head));
    }
    let m = ranks.len() as f64;
    let hit = |k: f64| ranks.iter().filter(|&&r| r <= k).count() as f64 / m;
    Reference {
        mrr: ranks.iter().map(|r| 1.0 / r).sum::<f64>() / m,
        hits: [hit(1.0), hit(3.0), hit(10.0)],
    }
}

fn random_graph(seed: u64) -> (PolarTable, Vec<IdTriple>, Vec<IdTriple>, f64) {
    let mut rng = seeded(seed);
    let ne = rng.random_range(2..=8);
    let nr = rng.random_range(1..=3);
    let k = rng.random_range(1..=4);
    let table = PolarTable::init(ne, nr, k, 6.0, &mut rng);
    let mut set = BTreeSet::new();
    for _ in 0..rng.random_range(2..=12) {
        let h = rng.random_range(0..ne);
        let t = rng.random_range(0..ne);
        if h != t {
            set.insert((h, rng.random_range(0..nr), t));
        }
    }
    let triples: Vec<IdTriple> = set.into_iter().collect();
    let cut = triples.len() / 2;
    let lambda = rng.random_range(0.0..2.0);
    (table, triples[..cut].to_vec(), triples[cut..].to_vec(), lambda)
}

#[test]
fn ranking_matches_exhaustive_reference() {
    let mut checked = 0;
    for seed in 0..40 {
        let (table, known, test, lambda) = random_graph(seed);
        if test.is_empty() {
            continue;
        }
        for filtered in [false, true] {
            let got = evaluate_link_prediction(&table, &known, &test, lambda, filtered).unwrap();
            let want = reference_eval(&table, &known, &test, lambda, filtered);
            assert!((got.mrr - want.mrr).abs() < 1e-12, "seed {seed}");
            assert!((got.hits_at_1 - want.hits[0]).abs() < 1e-12);
            assert!((got.hits_at_3 - want.hits[1]).abs() < 1e-12);
            assert!((got.hits_at_10 - want.hits[2]).abs() < 1e-12);
        }
        checked += 1;
    }
    assert!(checked >= 10);
}
