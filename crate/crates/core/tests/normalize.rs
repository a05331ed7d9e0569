//! Normalization as a fixed point, refinement across thresholds, and the
//! identical-embedding boundary at θ = 1.

use dualmar_core::kg::{
    normalize_detailed, normalize_kg, Category, CrossRefTable, Embedder, NormalizeConfig, RawEdge, RawEntity,
    RawGraph, Source, TrigramEmbedder,
};
use dualmar_core::rng::seeded;
use rand::Rng;

const WORDS: &[&str] = &[
    "heart failure",
    "Heart Failure",
    "heart failures",
    "hypertension",
    "Hypertension ",
    "high blood pressure",
    "narrowed arteries",
    "narrowed artery",
    "aspirin",
    "Aspirin",
    "fatigue",
    "shortness of breath",
    "breath shortness",
    "edema",
    "oedema",
    "chest pain",
];

const LABELS: &[&str] = &["IS_CAUSED_BY", "CAUSES", "HAS_SYMPTOM", "HAS_SYMPTOMS", "TREATS", "IS_A", "is_a"];

const CODES: &[&str] = &["428.0", "401.9", "786.05"];

fn random_raw(seed: u64) -> RawGraph {
    let mut rng = seeded(seed);
    let n = rng.random_range(2..=14);
    let entities: Vec<RawEntity> = (0..n)
        .map(|_| {
            let category = Category::ALL[rng.random_range(0..4)];
            let source_code = (category == Category::Disease && rng.random_bool(0.3))
                .then(|| CODES[rng.random_range(0..CODES.len())].to_string());
            RawEntity {
                surface: WORDS[rng.random_range(0..WORDS.len())].to_string(),
                category,
                source_code,
            }
        })
        .collect();
    let nl = rng.random_range(1..=LABELS.len());
    let relations: Vec<String> = LABELS[..nl].iter().map(|s| s.to_string()).collect();
    let triples = (0..rng.random_range(0..=20))
        .map(|_| RawEdge {
            head: rng.random_range(0..n),
            relation: rng.random_range(0..nl),
            tail: rng.random_range(0..n),
            source: if rng.random_bool(0.5) { Source::Ontology } else { Source::Generated },
        })
        .collect();
    RawGraph {
        entities,
        relations,
        triples,
    }
}

fn cfg(theta: f64) -> NormalizeConfig {
    NormalizeConfig {
        theta,
        relation_theta: None,
    }
}

#[test]
fn normalization_is_idempotent() {
    let xref = CrossRefTable::new();
    for seed in 0..100 {
        let theta = [0.5, 0.7, 0.85, 0.9, 1.0][(seed % 5) as usize];
        let g = normalize_kg(&random_raw(seed), &xref, &cfg(theta)).unwrap();
        let again = normalize_kg(&g.to_raw(), &xref, &cfg(theta)).unwrap();
        assert_eq!(g, again, "seed {seed} theta {theta}");
    }
}

#[test]
fn higher_threshold_refines_lower() {
    let xref = CrossRefTable::new();
    let thetas = [0.5, 0.7, 0.9, 1.0];
    for seed in 0..100 {
        let raw = random_raw(seed);
        let runs: Vec<_> = thetas
            .iter()
            .map(|&t| normalize_detailed(&raw, &xref, &cfg(t), &TrigramEmbedder).unwrap())
            .collect();
        for w in runs.windows(2) {
            let (lo, hi) = (&w[0], &w[1]);
            assert!(hi.graph.entities().len() >= lo.graph.entities().len());
            let n = raw.entities.len();
            for i in 0..n {
                for j in 0..n {
                    if hi.entity_of_raw[i] == hi.entity_of_raw[j] {
                        assert_eq!(lo.entity_of_raw[i], lo.entity_of_raw[j], "seed {seed}: {i} {j}");
                    }
                }
            }
            for a in 0..raw.relations.len() {
                for b in 0..raw.relations.len() {
                    if hi.relation_of_raw[a] == hi.relation_of_raw[b] {
                        assert_eq!(lo.relation_of_raw[a], lo.relation_of_raw[b]);
                    }
                }
            }
        }
    }
}

#[test]
fn threshold_one_merges_only_identical_embeddings() {
    let xref = CrossRefTable::new();
    let emb = TrigramEmbedder;
    let mut merges = 0;
    for seed in 0..100 {
        let raw = random_raw(seed);
        let out = normalize_detailed(&raw, &xref, &cfg(1.0), &emb).unwrap();
        let n = raw.entities.len();
        for i in 0..n {
            for j in (i + 1)..n {
                if out.entity_of_raw[i] != out.entity_of_raw[j] {
                    continue;
                }
                let (a, b) = (&raw.entities[i], &raw.entities[j]);
                let shared_code = a.source_code.is_some() && a.source_code == b.source_code;
                assert!(
                    shared_code || emb.embed(&a.surface) == emb.embed(&b.surface),
                    "seed {seed}: {a:?} / {b:?}"
                );
                merges += 1;
            }
        }
        for a in 0..raw.relations.len() {
            for b in (a + 1)..raw.relations.len() {
                if out.relation_of_raw[a] == out.relation_of_raw[b] {
                    assert_eq!(emb.embed(&raw.relations[a]), emb.embed(&raw.relations[b]));
                }
            }
        }
    }
    assert!(merges > 0);
}

#[test]
fn identical_surfaces_merge_at_any_positive_threshold() {
    let raw = RawGraph {
        entities: vec![
            RawEntity {
                surface: "Edema".into(),
                category: Category::Phenotype,
                source_code: None,
            },
            RawEntity {
                surface: "Edema".into(),
                category: Category::Phenotype,
                source_code: None,
            },
            RawEntity {
                surface: "Fever".into(),
                category: Category::Phenotype,
                source_code: None,
            },
        ],
        relations: vec!["IS_A".into()],
        triples: vec![RawEdge {
            head: 0,
            relation: 0,
            tail: 2,
            source: Source::Generated,
        }],
    };
    for theta in [0.01, 0.5, 1.0] {
        let out = normalize_detailed(&raw, &CrossRefTable::new(), &cfg(theta), &TrigramEmbedder).unwrap();
        assert_eq!(out.entity_of_raw[0], out.entity_of_raw[1]);
    }
}
