//! Loss trends of the three training loops on small generated data, and
//! the statistics of dropout.

use std::collections::{BTreeMap, BTreeSet};

use dualmar_core::ehr::{
    build_downstream_targets, build_proxy_targets, generate_synthetic, DownstreamSample, EhrDataset, ProxySample,
    SyntheticConfig, Task,
};
use dualmar_core::graph::{assemble_adjacency, build_cooccurrence, GraphOptions};
use dualmar_core::nn::ops::dropout;
use dualmar_core::nn::Matrix;
use dualmar_core::pipeline::{
    finetune, initial_features, proxy_individual_train, proxy_joint_train, GnnKind, GraphInput, Model, ModelConfig,
    Path, TrainConfig,
};
use dualmar_core::rng::seeded;

const SEEDS: u64 = 5;

fn dataset(seed: u64) -> EhrDataset {
    generate_synthetic(&SyntheticConfig {
        patients: 120,
        diseases: 30,
        labs: [10, 8, 3],
        clusters: 3,
        seed,
        ..Default::default()
    })
    .unwrap()
    .dataset
}

fn setup(seed: u64) -> (EhrDataset, GraphInput, Model) {
    let ds = dataset(seed);
    let b = build_cooccurrence(&ds, GraphOptions::default()).unwrap();
    let graph = GraphInput::new(&assemble_adjacency(&b, 0.5).unwrap(), GnnKind::Attention);
    let (x, _) = initial_features(&ds.vocab, 8, 6.0, &BTreeMap::new(), seed).unwrap();
    let cfg = ModelConfig {
        feature_dim: 16,
        gnn_hidden: 16,
        code_att_dim: 16,
        visit_att_dim: 16,
        patient_dim: 16,
        decoder_hidden: [16, 16],
        ..Default::default()
    };
    let model = Model::new(cfg, x, ds.vocab.category_sizes(), seed).unwrap();
    (ds, graph, model)
}

fn proxy(ds: &EhrDataset) -> Vec<ProxySample> {
    ds.patients.iter().map(|p| build_proxy_targets(&ds.vocab, p)).collect()
}

fn diagnosis(ds: &EhrDataset) -> Vec<DownstreamSample> {
    ds.patients
        .iter()
        .filter(|p| p.admissions.len() >= 2)
        .map(|p| build_downstream_targets(&ds.vocab, p, Task::Diagnosis, &BTreeSet::new(), false).unwrap())
        .collect()
}

fn train_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        lr: 5e-3,
        batch_size: 16,
        seed,
        ..Default::default()
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
fn joint_loss_does_not_rise() {
    let epochs = 6;
    let runs: Vec<Vec<f64>> = (0..SEEDS)
        .map(|s| {
            let (ds, graph, mut model) = setup(s);
            proxy_joint_train(&mut model, &graph, &proxy(&ds), &train_cfg(s), epochs, &mut |_, _| {}).unwrap()
        })
        .collect();
    for e in 0..epochs - 1 {
        let ratio = median(runs.iter().map(|r| r[e + 1] / r[e]).collect());
        assert!(ratio <= 1.02, "epoch {e}: {ratio}");
    }
    let overall = median(runs.iter().map(|r| r[epochs - 1] / r[0]).collect());
    assert!(overall < 1.0, "{overall}");
}

#[test]
fn individual_refinement_does_not_raise_category_loss() {
    let mut ratios = [vec![], vec![], vec![]];
    for s in 0..SEEDS {
        let (ds, graph, mut model) = setup(s);
        let samples = proxy(&ds);
        proxy_joint_train(&mut model, &graph, &samples, &train_cfg(s), 2, &mut |_, _| {}).unwrap();
        let r = proxy_individual_train(&mut model, &graph, &samples, &train_cfg(s), 4, &mut |_, _, _| {}).unwrap();
        for c in 0..3 {
            ratios[c].push(r.after[c] / r.before[c]);
        }
    }
    for (c, r) in ratios.into_iter().enumerate() {
        let m = median(r);
        assert!(m <= 1.0, "category {c}: {m}");
    }
}

#[test]
fn finetune_loss_falls() {
    for path in [Path::Finetune, Path::Direct] {
        let drops: Vec<f64> = (0..SEEDS)
            .map(|s| {
                let (ds, graph, mut model) = setup(s);
                let losses =
                    finetune(&mut model, &graph, &diagnosis(&ds), Task::Diagnosis, path, &train_cfg(s), 5, &mut |_, _| {})
                        .unwrap();
                losses[4] / losses[0]
            })
            .collect();
        assert!(median(drops) < 1.0, "{path:?}");
    }
}

#[test]
fn dropout_preserves_expectation() {
    let n = 100_000;
    let x = Matrix::from_fn(1, n, |_, j| 1.0 + (j % 7) as f64 * 0.25);
    let want = x.as_slice().iter().sum::<f64>() / n as f64;
    for rate in [0.2, 0.4, 0.5] {
        let (y, _) = dropout(&x, rate, true, &mut seeded(rate.to_bits()));
        let got = y.as_slice().iter().sum::<f64>() / n as f64;
        assert!((got / want - 1.0).abs() < 0.01, "rate {rate}: {got} vs {want}");
        let dropped = y.as_slice().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((dropped - rate).abs() < 0.01);
    }
    let (y, _) = dropout(&x, 0.5, false, &mut seeded(0));
    assert_eq!(y, x);
}
