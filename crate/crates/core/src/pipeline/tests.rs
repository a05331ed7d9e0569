use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;
use rand::Rng;

use super::*;
use crate::ehr::{
    build_downstream_targets, build_proxy_targets, EhrDataset, LabEntry, RawAdmission, RawPatient, Task, Visits,
    VocabFile,
};
use crate::graph::{assemble_adjacency, build_cooccurrence, GraphOptions};
use crate::nn::gradcheck::rel_err;
use crate::rng::seeded;

fn dataset() -> EhrDataset {
    let vocab = Vocab::new(VocabFile {
        diseases: ["001", "002", "003", "004"].map(String::from).to_vec(),
        labs: vec![
            LabEntry { code: "H1".into(), category: 1 },
            LabEntry { code: "H2".into(), category: 1 },
            LabEntry { code: "C1".into(), category: 2 },
            LabEntry { code: "C2".into(), category: 2 },
            LabEntry { code: "G1".into(), category: 3 },
        ],
    })
    .unwrap();
    let adm = |d: &[&str], l: &[&str]| RawAdmission {
        diseases: d.iter().map(|s| s.to_string()).collect(),
        abnormal_labs: l.iter().map(|s| s.to_string()).collect(),
    };
    let pats = vec![
        RawPatient {
            id: "a".into(),
            admissions: vec![adm(&["001", "002"], &["H1"]), adm(&["003"], &["C2"]), adm(&["002", "004"], &["H2", "G1"])],
        },
        RawPatient {
            id: "b".into(),
            admissions: vec![adm(&["004"], &[]), adm(&["001"], &["C1"])],
        },
        RawPatient {
            id: "c".into(),
            admissions: vec![adm(&["003", "001"], &["H1", "H2"])],
        },
    ];
    EhrDataset::from_raw(vocab, pats.into_iter().enumerate()).unwrap()
}

fn small_cfg(gnn: GnnKind) -> ModelConfig {
    ModelConfig {
        feature_dim: 4,
        gnn,
        gnn_layers: 2,
        gnn_hidden: 6,
        code_att_dim: 3,
        visit_att_dim: 2,
        patient_dim: 5,
        decoder_hidden: [5, 4],
        ..Default::default()
    }
}

fn setup(gnn: GnnKind, seed: u64) -> (EhrDataset, GraphInput, Model) {
    let ds = dataset();
    let b = build_cooccurrence(&ds, GraphOptions::default()).unwrap();
    let graph = GraphInput::new(&assemble_adjacency(&b, 0.5).unwrap(), gnn);
    // centered features keep a good share of relu units active in these
    // tiny widths
    let mut rng = seeded(seed + 1000);
    let x = Matrix::from_fn(ds.vocab.n_concepts(), 4, |_, _| rng.random_range(-1.0..1.0));
    let mut model = Model::new(small_cfg(gnn), x, ds.vocab.category_sizes(), seed).unwrap();
    // zero biases put relu inputs exactly on the kink for dead rows
    let biases: Vec<String> = model.store.names().filter(|n| n.contains("/b")).map(String::from).collect();
    for n in biases {
        for v in model.store.get_mut(&n).unwrap().as_mut_slice() {
            *v = rng.random_range(-0.1..0.1);
        }
    }
    (ds, graph, model)
}

/// Compares every accumulated gradient entry against central differences
/// of `loss`, which must not touch the gradients it is given.
fn fd_check(model: &mut Model, grads: impl Fn(&mut Model) -> f64, loss: impl Fn(&Model) -> f64) -> f64 {
    model.store.zero_grads();
    grads(model);
    let names: Vec<String> = model.store.names().map(String::from).collect();
    let mut worst: f64 = 0.0;
    for n in names {
        let g = model.store.grad(&n).unwrap().clone();
        for k in 0..g.len() {
            let orig = model.store.get(&n).unwrap().as_slice()[k];
            let eps = 1e-5;
            model.store.get_mut(&n).unwrap().as_mut_slice()[k] = orig + eps;
            let up = loss(model);
            model.store.get_mut(&n).unwrap().as_mut_slice()[k] = orig - eps;
            let down = loss(model);
            model.store.get_mut(&n).unwrap().as_mut_slice()[k] = orig;
            let num = (up - down) / (2.0 * eps);
            let e = rel_err(g.as_slice()[k], num);
            assert!(e <= 1e-4, "{n}[{k}]: analytic {} numeric {num}", g.as_slice()[k]);
            worst = worst.max(e);
        }
    }
    model.store.zero_grads();
    worst
}

fn proxy_samples(ds: &EhrDataset) -> Vec<ProxySample> {
    ds.patients.iter().map(|p| build_proxy_targets(&ds.vocab, p)).collect()
}

fn task_samples(ds: &EhrDataset, task: Task) -> Vec<DownstreamSample> {
    let hf: BTreeSet<usize> = [0].into();
    ds.patients
        .iter()
        .filter(|p| p.admissions.len() >= 2)
        .map(|p| build_downstream_targets(&ds.vocab, p, task, &hf, false).unwrap())
        .collect()
}

use crate::ehr::{DownstreamSample, ProxySample};

#[test]
fn proxy_gradients_match_differences() {
    for gnn in [GnnKind::Attention, GnnKind::AttentionWeighted, GnnKind::Propagation] {
        for seed in 0..3 {
            let (ds, graph, mut model) = setup(gnn, seed);
            let samples = proxy_samples(&ds);
            let idx: Vec<usize> = (0..samples.len()).collect();
            let targets = proxy_target_matrices(&samples).unwrap();
            fd_check(
                &mut model,
                |m| proxy_batch_gradients(m, &graph, &samples, &idx, false, &mut seeded(0)).unwrap(),
                |m| proxy_loss(&proxy_logits(m, &graph, &samples).unwrap(), &targets).unwrap(),
            );
        }
    }
}

#[test]
fn task_gradients_match_differences() {
    for (task, path) in [(Task::Diagnosis, Path::Direct), (Task::Diagnosis, Path::Finetune), (Task::Hf, Path::Finetune)] {
        for seed in 0..3 {
            let (ds, graph, mut model) = setup(GnnKind::Attention, seed);
            let samples = task_samples(&ds, task);
            let outputs = samples[0].target.len();
            model.attach_head(HeadSpec { task, path, outputs }, seed).unwrap();
            let idx: Vec<usize> = (0..samples.len()).collect();
            let truth = Matrix::from_vec(
                samples.len(),
                outputs,
                samples.iter().flat_map(|s| s.target.clone()).collect(),
            )
            .unwrap();
            let visits: Vec<Visits> = samples.iter().map(|s| s.visits.clone()).collect();
            fd_check(
                &mut model,
                |m| task_batch_gradients(m, &graph, &samples, &idx, false, &mut seeded(0)).unwrap(),
                |m| {
                    let refs: Vec<&Visits> = visits.iter().collect();
                    let probs = predict(m, &graph, &refs).unwrap();
                    // BCE from probabilities; fine away from 0 and 1
                    let mut total = 0.0;
                    for (p, y) in probs.as_slice().iter().zip(truth.as_slice()) {
                        total -= y * libm::log(*p) + (1.0 - y) * libm::log(1.0 - p);
                    }
                    total / probs.len() as f64
                },
            );
        }
    }
}

#[test]
fn parameter_names() {
    let (_, _, mut m) = setup(GnnKind::Attention, 0);
    m.attach_head(HeadSpec { task: Task::Hf, path: Path::Finetune, outputs: 1 }, 0).unwrap();
    let names: Vec<&str> = m.store.names().collect();
    assert_eq!(names.len(), 1 + 6 + 5 + 18 + 2);
    assert!(names.contains(&"encoder/gnn1/att_dst"));
    assert!(names.contains(&"decoder/3/b3"));
    assert_eq!(m.store.get("head/weight").unwrap().shape(), (3 * 4 + 5, 1));
    assert_eq!(m.store.get("decoder/2/w3").unwrap().shape(), (4, 2));
    let (_, _, p) = setup(GnnKind::Propagation, 0);
    assert!(!p.store.contains("encoder/gnn0/att_src"));
}

#[test]
fn singleton_admission_reduces_to_projection() {
    let (_, graph, model) = setup(GnnKind::Attention, 1);
    let visits: Visits = vec![vec![2]];
    let p = encode(&model, &graph, &[&visits]).unwrap();
    let (_, cache) = encoder_forward(&model, &graph, &[&visits], false, &mut seeded(0)).unwrap();
    let x = cache.node_states().gather_rows(&[2]);
    let expect = crate::nn::ops::relu(&crate::nn::ops::matmul(&x, model.store.get("encoder/proj/weight").unwrap()).unwrap());
    assert!(p.max_abs_diff(&expect) < 1e-15);
    let (code, visit) = &cache.attention_weights()[0];
    assert_eq!((code[0].as_slice(), visit.as_slice()), (&[1.0][..], &[1.0][..]));
}

#[test]
fn attention_weights_are_normalized_and_order_free() {
    let (_, graph, model) = setup(GnnKind::Attention, 2);
    let a: Visits = vec![vec![0, 1, 4], vec![2, 7, 3]];
    let b: Visits = vec![vec![4, 0, 1], vec![3, 2, 7]];
    let pa = encode(&model, &graph, &[&a]).unwrap();
    let pb = encode(&model, &graph, &[&b]).unwrap();
    assert!(pa.max_abs_diff(&pb) < 1e-12);
    let (_, cache) = encoder_forward(&model, &graph, &[&a], false, &mut seeded(0)).unwrap();
    for (codes, visit) in cache.attention_weights() {
        for w in codes.iter().chain([&visit]) {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
    }
    assert!(matches!(
        encode(&model, &graph, &[&vec![vec![99]]]),
        Err(PipelineError::MissingFeatureRow(99))
    ));
}

#[test]
fn zero_epochs_change_nothing() {
    let (ds, graph, mut model) = setup(GnnKind::Attention, 0);
    let before = model.clone();
    let losses = proxy_joint_train(&mut model, &graph, &proxy_samples(&ds), &TrainConfig::default(), 0, &mut |_, _| {}).unwrap();
    assert!(losses.is_empty());
    assert_eq!(model, before);
}

#[test]
fn freeze_and_isolation() {
    let (ds, graph, mut model) = setup(GnnKind::Attention, 0);
    let samples = proxy_samples(&ds);
    let cfg = TrainConfig { batch_size: 2, ..Default::default() };
    proxy_joint_train(&mut model, &graph, &samples, &cfg, 2, &mut |_, _| {}).unwrap();
    let encoder = |m: &Model| -> Vec<(String, Vec<u64>)> {
        m.store
            .iter()
            .filter(|p| p.name.starts_with("encoder/"))
            .map(|p| (p.name.clone(), p.value.as_slice().iter().map(|x| x.to_bits()).collect()))
            .collect()
    };
    let before = encoder(&model);
    let snapshot = model.clone();
    let visits: Vec<&Visits> = samples.iter().map(|s| &s.visits).collect();
    let p = encode(&model, &graph, &visits).unwrap();
    let y = proxy_target_matrices(&samples).unwrap();
    refine_decoder(&mut model, &p, &y[0], 0, &cfg, 2, &mut |_, _| {}).unwrap();
    for prm in model.store.iter() {
        let old = snapshot.store.get(&prm.name).unwrap();
        assert_eq!(&prm.value != old, prm.name.starts_with("decoder/1/"), "{}", prm.name);
    }
    let rep = proxy_individual_train(&mut model, &graph, &samples, &cfg, 3, &mut |_, _, _| {}).unwrap();
    assert_eq!(encoder(&model), before);
    assert!(rep.after.iter().all(|x| x.is_finite()));
    // the freeze is released afterwards
    assert!(model.store.iter().all(|p| !p.is_frozen()));
}

#[test]
fn frozen_encoder_rejects_updates() {
    let (ds, graph, mut model) = setup(GnnKind::Attention, 0);
    let samples = proxy_samples(&ds);
    let idx = [0usize, 1];
    model.store.freeze("encoder/");
    proxy_batch_gradients(&mut model, &graph, &samples, &idx, false, &mut seeded(0)).unwrap();
    let err = crate::nn::adam_step(&mut model.store, &Default::default(), 1e-3, |_| true).unwrap_err();
    assert!(matches!(err, crate::nn::NnError::FrozenViolation(_)));
}

#[test]
fn zero_head_gives_half() {
    let (ds, graph, mut model) = setup(GnnKind::Attention, 0);
    let samples = task_samples(&ds, Task::Diagnosis);
    model.attach_head(HeadSpec { task: Task::Diagnosis, path: Path::Finetune, outputs: 4 }, 0).unwrap();
    model.store.get_mut("head/weight").unwrap().fill(0.0);
    let visits: Vec<&Visits> = samples.iter().map(|s| &s.visits).collect();
    let probs = predict(&model, &graph, &visits).unwrap();
    assert!(probs.as_slice().iter().all(|&p| p == 0.5));
    assert_eq!(model.head_input(Path::Finetune), 3 * 4 + 5);
}

#[test]
fn lab_embeddings_widths_and_bias_only_input() {
    let (_, _, model) = setup(GnnKind::Attention, 3);
    let zero = Matrix::zeros(2, 5);
    let l = lab_embeddings(&model, &zero).unwrap();
    for (i, e) in l.iter().enumerate() {
        assert_eq!(e.shape(), (2, 4));
        let p = decoder_prefix(i);
        let b1 = crate::nn::ops::relu(model.store.get(&alloc::format!("{p}/b1")).unwrap());
        let h = crate::nn::ops::add_row_bias(
            &crate::nn::ops::matmul(&b1, model.store.get(&alloc::format!("{p}/w2")).unwrap()).unwrap(),
            model.store.get(&alloc::format!("{p}/b2")).unwrap(),
        )
        .unwrap();
        assert!(crate::nn::ops::relu(&h).max_abs_diff(&e.gather_rows(&[0])) < 1e-15);
    }
}

#[test]
fn training_is_deterministic_and_reduces_loss() {
    let run = || {
        let (ds, graph, mut model) = setup(GnnKind::Attention, 4);
        let samples = task_samples(&ds, Task::Diagnosis);
        let cfg = TrainConfig { lr: 0.01, batch_size: 2, ..Default::default() };
        let losses = finetune(&mut model, &graph, &samples, Task::Diagnosis, Path::Direct, &cfg, 30, &mut |_, _| {}).unwrap();
        (losses, model)
    };
    let (l1, m1) = run();
    let (l2, m2) = run();
    assert_eq!(l1, l2);
    assert_eq!(m1, m2);
    assert!(l1.last().unwrap() < &l1[0]);
}

#[test]
fn features_take_prior_rows() {
    let ds = dataset();
    let mut prior = BTreeMap::new();
    prior.insert("002".to_string(), vec![1.0, 2.0, 3.0, 4.0]);
    prior.insert("999".to_string(), vec![0.0; 4]);
    let (x, matched) = initial_features(&ds.vocab, 2, 2.0, &prior, 0).unwrap();
    assert_eq!(matched, 1);
    assert_eq!(x.row(1), &[1.0, 2.0, 3.0, 4.0]);
    prior.insert("001".to_string(), vec![0.0; 3]);
    assert!(matches!(initial_features(&ds.vocab, 2, 2.0, &prior, 0), Err(PipelineError::PriorWidth { .. })));
}
