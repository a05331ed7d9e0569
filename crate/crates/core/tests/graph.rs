//! Co-occurrence counts against brute force, and the adjacency identities,
//! on random generated datasets.

use dualmar_core::ehr::{generate_synthetic, EhrDataset, SyntheticConfig};
use dualmar_core::graph::{assemble_adjacency, build_cooccurrence, GraphOptions};
use dualmar_core::rng::seeded;
use rand::Rng;

fn random_dataset(seed: u64) -> (EhrDataset, GraphOptions, f64) {
    let mut rng = seeded(seed);
    let clusters = rng.random_range(1..=3);
    let cfg = SyntheticConfig {
        patients: rng.random_range(5..=40),
        diseases: clusters * 2 + rng.random_range(0..=10),
        labs: [rng.random_range(1..=5), rng.random_range(1..=4), rng.random_range(1..=3)],
        clusters,
        parents_per_cluster: 2,
        affinity: rng.random_range(0.0..=1.0),
        progression: rng.random_range(0.0..=1.0),
        background: rng.random_range(0.0..0.3),
        mean_admissions: rng.random_range(1.0..3.0),
        max_admissions: 6,
        max_codes: rng.random_range(1..=5),
        hf_markers: 1,
        seed,
        ..Default::default()
    };
    let opts = GraphOptions {
        disease_lab: rng.random_bool(0.7),
        lab_lab: rng.random_bool(0.3),
        per_patient_dedup: rng.random_bool(0.3),
    };
    let phi = if seed % 10 == 0 { [0.0, 1.0][(seed / 10 % 2) as usize] } else { rng.random_range(0.0..=1.0) };
    (generate_synthetic(&cfg).unwrap().dataset, opts, phi)
}

/// Dense counts straight from the definition.
fn brute_force(ds: &EhrDataset, opts: GraphOptions) -> Vec<Vec<u64>> {
    let v = &ds.vocab;
    let n = v.n_concepts();
    let is_lab = |c: usize| c >= v.n_diseases();
    let mut b = vec![vec![0u64; n]; n];
    for p in &ds.patients {
        let mut seen = vec![vec![false; n]; n];
        for a in &p.admissions {
            let mut present = vec![false; n];
            for c in a.concepts(v) {
                present[c] = true;
            }
            for i in 0..n {
                for j in 0..n {
                    if i == j || !present[i] || !present[j] {
                        continue;
                    }
                    let allowed = match (is_lab(i), is_lab(j)) {
                        (false, false) => true,
                        (true, true) => opts.lab_lab,
                        _ => opts.disease_lab,
                    };
                    if !allowed || (opts.per_patient_dedup && seen[i][j]) {
                        continue;
                    }
                    seen[i][j] = true;
                    b[i][j] += 1;
                }
            }
        }
    }
    b
}

#[test]
fn counts_match_brute_force_and_are_symmetric() {
    for seed in 0..50 {
        let (ds, opts, _) = random_dataset(seed);
        let b = build_cooccurrence(&ds, opts).unwrap();
        let want = brute_force(&ds, opts);
        let n = b.n();
        for i in 0..n {
            assert_eq!(b.get(i, i), 0);
            for j in 0..n {
                assert_eq!(b.get(i, j), b.get(j, i), "seed {seed}");
                assert_eq!(b.get(i, j), want[i][j], "seed {seed} ({i}, {j})");
            }
        }
    }
}

#[test]
fn counts_add_over_patient_partitions() {
    for seed in 0..50 {
        let (ds, opts, _) = random_dataset(seed);
        let cut = ds.patients.len() / 2;
        let part = |range: std::ops::Range<usize>| EhrDataset {
            vocab: ds.vocab.clone(),
            patients: ds.patients[range].to_vec(),
        };
        let whole = build_cooccurrence(&ds, opts).unwrap();
        let first = build_cooccurrence(&part(0..cut), opts).unwrap();
        let second = build_cooccurrence(&part(cut..ds.patients.len()), opts).unwrap();
        assert_eq!(first.add(&second).unwrap(), whole, "seed {seed}");
    }
}

#[test]
fn adjacency_identities() {
    for seed in 0..50 {
        let (ds, opts, phi) = random_dataset(seed);
        let b = build_cooccurrence(&ds, opts).unwrap();
        let adj = assemble_adjacency(&b, phi).unwrap();
        let a = adj.a_dense();
        let n = b.n();
        for i in 0..n {
            for j in 0..n {
                let id = if i == j { 1.0 } else { 0.0 };
                let want = (1.0 - phi) * b.get(i, j) as f64 + phi * id;
                assert_eq!(a.get(i, j), want, "seed {seed} ({i}, {j})");
            }
        }
        let a_hat = adj.a_hat_dense();
        for i in 0..n {
            let s: f64 = (0..n).map(|j| a_hat.get(i, j)).sum();
            assert!((s - 1.0).abs() < 1e-9, "seed {seed} row {i}: {s}");
            assert!((0..n).all(|j| a_hat.get(i, j) >= 0.0));
        }
    }
}

#[test]
fn phi_outside_unit_interval_is_rejected() {
    let (ds, opts, _) = random_dataset(1);
    let b = build_cooccurrence(&ds, opts).unwrap();
    assert!(assemble_adjacency(&b, -0.1).is_err());
    assert!(assemble_adjacency(&b, 1.5).is_err());
}
