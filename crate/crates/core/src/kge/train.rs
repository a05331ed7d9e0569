use alloc::collections::BTreeSet;
use alloc::vec::Vec;
use rand::Rng;

use super::{angular_unchecked, radial_unchecked, wrap_angle, IdTriple, KgeError, PolarTable, Result};
use crate::nn::ops::{sigmoid, softplus};
use crate::nn::{adam_step, AdamConfig, Matrix, ParamStore};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KgeTrainConfig {
    pub k: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub negatives: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for KgeTrainConfig {
    fn default() -> Self {
        Self {
            k: 64,
            gamma: 12.0,
            lambda: 1.0,
            negatives: 64,
            lr: 1e-3,
            steps: 20_000,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl KgeTrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m| Err(KgeError::ConfigInvalid(m));
        if self.k == 0 {
            return bad("k must be positive");
        }
        if !(self.gamma > 0.0) {
            return bad("gamma must be positive");
        }
        if !(self.lambda >= 0.0) {
            return bad("lambda must be non-negative");
        }
        if self.negatives == 0 {
            return bad("negatives must be at least 1");
        }
        if !(self.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        Ok(())
    }
}

/// Positives with their sampled negatives.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub positives: Vec<IdTriple>,
    pub negatives: Vec<Vec<IdTriple>>,
}

const MAX_REJECTIONS: usize = 1000;

/// Draws positives uniformly (with replacement) and corrupts head or tail
/// with probability 1/2, redrawing while the corruption is a known triple.
pub fn sample_batch<R: Rng + ?Sized>(
    train: &[IdTriple],
    known: &BTreeSet<IdTriple>,
    n_entities: usize,
    batch_size: usize,
    negatives: usize,
    rng: &mut R,
) -> Batch {
    let mut positives = Vec::with_capacity(batch_size);
    let mut negs = Vec::with_capacity(batch_size);
    for _ in 0..batch_size {
        let p = train[rng.random_range(0..train.len())];
        let mut ns = Vec::with_capacity(negatives);
        for _ in 0..negatives {
            let corrupt_head = rng.random::<bool>();
            let mut cand = p;
            for _ in 0..MAX_REJECTIONS {
                let e = rng.random_range(0..n_entities);
                cand = if corrupt_head { (e, p.1, p.2) } else { (p.0, p.1, e) };
                if !known.contains(&cand) {
                    break;
                }
            }
            ns.push(cand);
        }
        positives.push(p);
        negs.push(ns);
    }
    Batch {
        positives,
        negatives: negs,
    }
}

/// Dense gradients shaped like the table.
#[derive(Debug, Clone, PartialEq)]
pub struct KgeGrads {
    pub entity_modulus: Matrix,
    pub entity_phase: Matrix,
    pub relation_modulus: Matrix,
    pub relation_phase: Matrix,
}

impl KgeGrads {
    fn zeros_like(t: &PolarTable) -> Self {
        let z = |m: &Matrix| Matrix::zeros(m.rows(), m.cols());
        Self {
            entity_modulus: z(&t.entity_modulus),
            entity_phase: z(&t.entity_phase),
            relation_modulus: z(&t.relation_modulus),
            relation_phase: z(&t.relation_phase),
        }
    }
}

/// Adds `coef · ∂d/∂θ` for one triple.
fn add_distance_grad(t: &PolarTable, (h, r, tl): IdTriple, coef: f64, lambda: f64, g: &mut KgeGrads) {
    let k = t.k();
    let dr = radial_unchecked(t, (h, r, tl));
    if dr > 0.0 {
        let c = coef / dr;
        for i in 0..k {
            let (hm, rm, tm) = (
                t.entity_modulus.get(h, i),
                t.relation_modulus.get(r, i),
                t.entity_modulus.get(tl, i),
            );
            let e = hm * rm - tm;
            g.entity_modulus.row_mut(h)[i] += c * e * rm;
            g.relation_modulus.row_mut(r)[i] += c * e * hm;
            g.entity_modulus.row_mut(tl)[i] -= c * e;
        }
    }
    if lambda != 0.0 {
        for i in 0..k {
            let d = wrap_angle(t.entity_phase.get(h, i) + t.relation_phase.get(r, i) - t.entity_phase.get(tl, i));
            let s = libm::sin(d / 2.0);
            if s == 0.0 {
                continue;
            }
            let sign = if s > 0.0 { 1.0 } else { -1.0 };
            let v = coef * lambda * sign * libm::cos(d / 2.0) / 2.0;
            g.entity_phase.row_mut(h)[i] += v;
            g.relation_phase.row_mut(r)[i] += v;
            g.entity_phase.row_mut(tl)[i] -= v;
        }
    }
}

/// Batch-mean negative-sampling loss and its exact gradients.
pub fn loss_and_gradients(table: &PolarTable, batch: &Batch, gamma: f64, lambda: f64) -> (f64, KgeGrads) {
    let mut g = KgeGrads::zeros_like(table);
    let n = batch.positives.len().max(1) as f64;
    let mut loss = 0.0;
    let dist = |tr| radial_unchecked(table, tr) + lambda * angular_unchecked(table, tr);
    for (p, negs) in batch.positives.iter().zip(&batch.negatives) {
        let dp = dist(*p);
        loss += softplus(dp - gamma);
        add_distance_grad(table, *p, sigmoid(dp - gamma) / n, lambda, &mut g);
        for q in negs {
            let dn = dist(*q);
            loss += softplus(gamma - dn);
            add_distance_grad(table, *q, -sigmoid(gamma - dn) / n, lambda, &mut g);
        }
    }
    (loss / n, g)
}

const NAMES: [&str; 4] = ["entity_modulus", "entity_phase", "relation_modulus", "relation_phase"];

fn to_store(t: PolarTable) -> ParamStore {
    let mut s = ParamStore::new();
    for (name, m) in NAMES.iter().zip([t.entity_modulus, t.entity_phase, t.relation_modulus, t.relation_phase]) {
        s.insert(name, m).expect("distinct names");
    }
    s
}

fn from_store(s: &ParamStore) -> PolarTable {
    let get = |n: &str| s.get(n).expect("present").clone();
    PolarTable {
        entity_modulus: get(NAMES[0]),
        entity_phase: get(NAMES[1]),
        relation_modulus: get(NAMES[2]),
        relation_phase: get(NAMES[3]),
    }
}

/// Trains a table on `train`; `on_step(step, loss)` observes progress.
pub fn train_kge(
    n_entities: usize,
    n_relations: usize,
    train: &[IdTriple],
    cfg: &KgeTrainConfig,
    on_step: &mut dyn FnMut(usize, f64),
) -> Result<PolarTable> {
    cfg.validate()?;
    if train.is_empty() || n_entities == 0 {
        return Err(KgeError::ConfigInvalid("training graph is empty"));
    }
    for &(h, r, t) in train {
        if h >= n_entities || t >= n_entities || r >= n_relations {
            return Err(KgeError::IndexOutOfRange {
                kind: "triple",
                index: h.max(t),
                size: n_entities,
            });
        }
    }
    let mut init_rng = seeded(derive_seed(cfg.seed, 0));
    let table = PolarTable::init(n_entities, n_relations, cfg.k, cfg.gamma, &mut init_rng);
    if cfg.steps == 0 {
        return Ok(table);
    }
    let known: BTreeSet<IdTriple> = train.iter().copied().collect();
    let mut rng = seeded(derive_seed(cfg.seed, 1));
    let mut store = to_store(table);
    let adam = AdamConfig::default();
    for step in 0..cfg.steps {
        let table = from_store(&store);
        let batch = sample_batch(train, &known, n_entities, cfg.batch_size, cfg.negatives, &mut rng);
        let (loss, g) = loss_and_gradients(&table, &batch, cfg.gamma, cfg.lambda);
        for (name, m) in NAMES.iter().zip([&g.entity_modulus, &g.entity_phase, &g.relation_modulus, &g.relation_phase]) {
            store.accumulate(name, m).expect("shapes match");
        }
        adam_step(&mut store, &adam, cfg.lr, |_| true).expect("all gradients present");
        on_step(step, loss);
    }
    Ok(from_store(&store))
}

/// Gradient-check problem for [`loss_and_gradients`] on a small random
/// table and batch. The margin is the distance of every radial distance
/// from zero and every phase residual from a multiple of 2π.
pub fn loss_check_case(rng: &mut crate::rng::SeededRng) -> crate::nn::Result<crate::nn::gradcheck::Instance> {
    use crate::nn::gradcheck::{random_matrix, Instance};
    let ne = rng.random_range(3..=6);
    let nr = rng.random_range(1..=2);
    let k = rng.random_range(1..=4);
    let table = PolarTable {
        entity_modulus: random_matrix(rng, ne, k, 2.0),
        entity_phase: Matrix::from_fn(ne, k, |_, _| rng.random_range(0.0..core::f64::consts::TAU)),
        relation_modulus: random_matrix(rng, nr, k, 2.0),
        relation_phase: Matrix::from_fn(nr, k, |_, _| rng.random_range(0.0..core::f64::consts::TAU)),
    };
    let train: Vec<IdTriple> = (0..3)
        .map(|_| (rng.random_range(0..ne), rng.random_range(0..nr), rng.random_range(0..ne)))
        .collect();
    let known: BTreeSet<IdTriple> = train.iter().copied().collect();
    let batch = sample_batch(&train, &known, ne, 3, 2, rng);
    let gamma = rng.random_range(1.0..8.0);
    let lambda = rng.random_range(0.1..1.5);
    let mut margin = f64::INFINITY;
    for &tr in batch.positives.iter().chain(batch.negatives.iter().flatten()) {
        margin = margin.min(radial_unchecked(&table, tr));
        for i in 0..k {
            let d = wrap_angle(
                table.entity_phase.get(tr.0, i) + table.relation_phase.get(tr.1, i) - table.entity_phase.get(tr.2, i),
            );
            margin = margin.min(d).min(core::f64::consts::TAU - d);
        }
    }
    let inputs = alloc::vec![
        table.entity_modulus,
        table.entity_phase,
        table.relation_modulus,
        table.relation_phase
    ];
    Ok(Instance {
        inputs,
        margin,
        loss: alloc::boxed::Box::new(move |xs| {
            let t = PolarTable {
                entity_modulus: xs[0].clone(),
                entity_phase: xs[1].clone(),
                relation_modulus: xs[2].clone(),
                relation_phase: xs[3].clone(),
            };
            let (l, g) = loss_and_gradients(&t, &batch, gamma, lambda);
            Ok((l, alloc::vec![g.entity_modulus, g.entity_phase, g.relation_modulus, g.relation_phase]))
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::{check_instance, Instance, EPS};
    use crate::rng::seeded;
    use alloc::boxed::Box;
    use alloc::vec;

    fn random_table(seed: u64, ne: usize, nr: usize, k: usize) -> PolarTable {
        let mut rng = seeded(seed);
        let mut t = PolarTable::init(ne, nr, k, 12.0, &mut rng);
        // moduli of order one keep d_r away from its kink at zero
        for v in t.entity_modulus.as_mut_slice().iter_mut().chain(t.relation_modulus.as_mut_slice()) {
            *v = rng.random_range(-2.0..2.0);
        }
        t
    }

    fn flat(t: &PolarTable) -> Vec<Matrix> {
        vec![
            t.entity_modulus.clone(),
            t.entity_phase.clone(),
            t.relation_modulus.clone(),
            t.relation_phase.clone(),
        ]
    }

    fn unflat(xs: &[Matrix]) -> PolarTable {
        PolarTable {
            entity_modulus: xs[0].clone(),
            entity_phase: xs[1].clone(),
            relation_modulus: xs[2].clone(),
            relation_phase: xs[3].clone(),
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..20 {
            let t = random_table(seed, 6, 2, 3);
            let mut rng = seeded(seed + 100);
            let train = vec![(0, 0, 1), (2, 1, 3), (4, 0, 5)];
            let batch = sample_batch(&train, &train.iter().copied().collect(), 6, 3, 2, &mut rng);
            let inst = Instance {
                inputs: flat(&t),
                margin: f64::INFINITY,
                loss: Box::new(move |xs| {
                    let (l, g) = loss_and_gradients(&unflat(xs), &batch, 5.0, 0.7);
                    Ok((l, vec![g.entity_modulus, g.entity_phase, g.relation_modulus, g.relation_phase]))
                }),
            };
            let err = check_instance(&inst, EPS).unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }

    #[test]
    fn untouched_rows_have_zero_gradient() {
        let t = random_table(1, 5, 1, 4);
        let batch = Batch {
            positives: vec![(0, 0, 1)],
            negatives: vec![vec![(0, 0, 2)]],
        };
        let (_, g) = loss_and_gradients(&t, &batch, 3.0, 1.0);
        for row in [3, 4] {
            assert!(g.entity_modulus.row(row).iter().all(|&x| x == 0.0));
            assert!(g.entity_phase.row(row).iter().all(|&x| x == 0.0));
        }
    }

    #[test]
    fn lambda_zero_decouples_phase() {
        let t = random_table(2, 3, 1, 4);
        let batch = Batch {
            positives: vec![(0, 0, 1)],
            negatives: vec![vec![]],
        };
        let (_, g) = loss_and_gradients(&t, &batch, 3.0, 0.0);
        assert!(g.entity_phase.as_slice().iter().all(|&x| x == 0.0));
        assert!(g.relation_phase.as_slice().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn zero_steps_is_init_and_seeded() {
        let train = vec![(0, 0, 1), (1, 0, 2)];
        let cfg = KgeTrainConfig { k: 4, steps: 0, ..Default::default() };
        let a = train_kge(3, 1, &train, &cfg, &mut |_, _| {}).unwrap();
        let init = PolarTable::init(3, 1, 4, cfg.gamma, &mut seeded(derive_seed(cfg.seed, 0)));
        assert_eq!(a, init);
        let cfg = KgeTrainConfig { k: 4, steps: 5, negatives: 2, ..Default::default() };
        let b = train_kge(3, 1, &train, &cfg, &mut |_, _| {}).unwrap();
        let c = train_kge(3, 1, &train, &cfg, &mut |_, _| {}).unwrap();
        assert_eq!(b, c);
        assert_ne!(a, b);
    }

    #[test]
    fn negatives_avoid_known_triples() {
        let train = vec![(0, 0, 1), (0, 0, 2), (1, 0, 2)];
        let known = train.iter().copied().collect();
        let b = sample_batch(&train, &known, 4, 50, 4, &mut seeded(3));
        for ns in &b.negatives {
            for n in ns {
                assert!(!known.contains(n));
            }
        }
    }
}
