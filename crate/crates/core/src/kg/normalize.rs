use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use super::cluster::cluster_vectors;
use super::{
    apply_cross_reference, Category, CrossRefTable, Embedder, Entity, KnowledgeGraph, RawGraph, Relation, Result,
    Source, Triple, TrigramEmbedder,
};

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NormalizeConfig {
    /// Entity similarity threshold.
    pub theta: f64,
    /// Relation-label threshold; falls back to `theta` when absent.
    #[serde(default)]
    pub relation_theta: Option<f64>,
}

impl Default for NormalizeConfig {
    fn default() -> Self {
        Self {
            theta: 0.85,
            relation_theta: None,
        }
    }
}

/// Clusters `items` (embeddings plus optional codes) repeatedly, collapsing
/// each cluster onto its canonical member, until a pass merges nothing.
/// Returns the final representative per input position.
fn cluster_to_fixed_point(vecs: &[Vec<f64>], codes: &[Option<String>], theta: f64) -> Vec<usize> {
    let mut rep: Vec<usize> = (0..vecs.len()).collect();
    let mut live: Vec<usize> = (0..vecs.len()).collect();
    loop {
        let v: Vec<Vec<f64>> = live.iter().map(|&i| vecs[i].clone()).collect();
        let c: Vec<Option<String>> = live.iter().map(|&i| codes[i].clone()).collect();
        let clustering = cluster_vectors(&v, c, theta);
        if clustering.clusters.len() == live.len() {
            return rep;
        }
        let canon: Vec<usize> = clustering
            .clusters
            .iter()
            .map(|members| {
                let coded = members.iter().map(|&k| live[k]).filter(|&i| codes[i].is_some()).min();
                coded.unwrap_or_else(|| members.iter().map(|&k| live[k]).min().expect("non-empty"))
            })
            .collect();
        let mut remap = BTreeMap::new();
        for (k, &i) in live.iter().enumerate() {
            remap.insert(i, canon[clustering.assignment[k]]);
        }
        for r in rep.iter_mut() {
            *r = remap[r];
        }
        live = canon;
        live.sort_unstable();
    }
}

/// Cross-references, clusters and deduplicates a raw graph.
pub fn normalize_kg(raw: &RawGraph, xref: &CrossRefTable, cfg: &NormalizeConfig) -> Result<KnowledgeGraph> {
    normalize_kg_with(raw, xref, cfg, &TrigramEmbedder)
}

pub fn normalize_kg_with(
    raw: &RawGraph,
    xref: &CrossRefTable,
    cfg: &NormalizeConfig,
    embedder: &dyn Embedder,
) -> Result<KnowledgeGraph> {
    Ok(normalize_detailed(raw, xref, cfg, embedder)?.graph)
}

/// A normalized graph with the canonical id of every raw entity and raw
/// relation label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Normalization {
    pub graph: KnowledgeGraph,
    pub entity_of_raw: Vec<usize>,
    pub relation_of_raw: Vec<usize>,
}

pub fn normalize_detailed(
    raw: &RawGraph,
    xref: &CrossRefTable,
    cfg: &NormalizeConfig,
    embedder: &dyn Embedder,
) -> Result<Normalization> {
    let theta = cfg.theta;
    let rel_theta = cfg.relation_theta.unwrap_or(theta);
    for t in [theta, rel_theta] {
        if !(0.0..=1.0).contains(&t) {
            return Err(super::KgError::InvalidThreshold(t));
        }
    }
    let xr = apply_cross_reference(raw, xref)?;

    // exact duplicates first: same category, surface and code
    let mut nodes: Vec<(Category, String, Option<String>)> = Vec::new();
    let mut node_of_key = BTreeMap::new();
    let mut node_of_raw = Vec::with_capacity(raw.entities.len());
    for (e, code) in raw.entities.iter().zip(&xr.codes) {
        let key = (e.category, e.surface.trim().into(), code.clone());
        let n = *node_of_key.entry(key.clone()).or_insert_with(|| {
            nodes.push(key);
            nodes.len() - 1
        });
        node_of_raw.push(n);
    }

    let mut node_rep: Vec<usize> = (0..nodes.len()).collect();
    for cat in Category::ALL {
        let idx: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].0 == cat).collect();
        let vecs: Vec<Vec<f64>> = idx.iter().map(|&i| embedder.embed(&nodes[i].1)).collect();
        let codes: Vec<Option<String>> = idx.iter().map(|&i| nodes[i].2.clone()).collect();
        let rep = cluster_to_fixed_point(&vecs, &codes, theta);
        for (k, &i) in idx.iter().enumerate() {
            node_rep[i] = idx[rep[k]];
        }
    }

    let mut labels: Vec<String> = Vec::new();
    let mut label_of_raw = Vec::with_capacity(raw.relations.len());
    for r in &raw.relations {
        let r = r.trim();
        let n = match labels.iter().position(|l| l == r) {
            Some(n) => n,
            None => {
                labels.push(r.into());
                labels.len() - 1
            }
        };
        label_of_raw.push(n);
    }
    let lvecs: Vec<Vec<f64>> = labels.iter().map(|l| embedder.embed(l)).collect();
    let label_rep = cluster_to_fixed_point(&lvecs, &alloc::vec![None; labels.len()], rel_theta);

    // canonical vocabularies in sorted order
    let mut reps: Vec<usize> = node_rep.clone();
    reps.sort_unstable();
    reps.dedup();
    reps.sort_by(|&a, &b| nodes[a].cmp(&nodes[b]));
    let mut new_id = alloc::vec![usize::MAX; nodes.len()];
    for (id, &n) in reps.iter().enumerate() {
        new_id[n] = id;
    }
    let entities: Vec<Entity> = reps
        .iter()
        .enumerate()
        .map(|(id, &n)| Entity {
            id,
            surface: nodes[n].1.clone(),
            category: nodes[n].0,
            code: nodes[n].2.clone(),
        })
        .collect();

    let mut lreps: Vec<usize> = label_rep.clone();
    lreps.sort_unstable();
    lreps.dedup();
    lreps.sort_by(|&a, &b| labels[a].cmp(&labels[b]));
    let mut new_rel = alloc::vec![usize::MAX; labels.len()];
    for (id, &l) in lreps.iter().enumerate() {
        new_rel[l] = id;
    }
    let relations: Vec<Relation> = lreps
        .iter()
        .enumerate()
        .map(|(id, &l)| Relation {
            id,
            label: labels[l].clone(),
        })
        .collect();

    let mut triples: BTreeMap<(usize, usize, usize), Source> = BTreeMap::new();
    for t in &raw.triples {
        let h = new_id[node_rep[node_of_raw[t.head]]];
        let tl = new_id[node_rep[node_of_raw[t.tail]]];
        let r = new_rel[label_rep[label_of_raw[t.relation]]];
        if h == tl {
            continue;
        }
        triples
            .entry((h, r, tl))
            .and_modify(|s| *s = (*s).min(t.source))
            .or_insert(t.source);
    }
    let triples = triples
        .into_iter()
        .map(|((head, relation, tail), source)| Triple {
            head,
            relation,
            tail,
            source,
        })
        .collect();
    Ok(Normalization {
        graph: KnowledgeGraph::from_parts(entities, relations, triples)?,
        entity_of_raw: node_of_raw.iter().map(|&n| new_id[node_rep[n]]).collect(),
        relation_of_raw: label_of_raw.iter().map(|&l| new_rel[label_rep[l]]).collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::{kg_stats, parse_triple_tsv, RawGraph};

    fn graph(tsv: &str, theta: f64) -> KnowledgeGraph {
        let raw = RawGraph::from_triples(&parse_triple_tsv(tsv).unwrap(), Source::Generated);
        normalize_kg(&raw, &CrossRefTable::new(), &NormalizeConfig { theta, relation_theta: None }).unwrap()
    }

    #[test]
    fn duplicates_and_self_loops_dropped() {
        let g = graph(
            "Heart Failure\tIS_CAUSED_BY\tHypertension\tDisease-Disease\n\
             heart failure\tIS_CAUSED_BY\tHypertension\tDisease-Disease\n\
             Hypertension\tIS_A\thypertension\tDisease-Disease\n",
            0.99,
        );
        let s = kg_stats(&g);
        assert_eq!((s.nodes, s.triples), (2, 1));
    }

    #[test]
    fn idempotent_on_small_graph() {
        let g = graph(
            "Heart Failure\tIS_CAUSED_BY\tHypertension\tDisease-Disease\n\
             Heart Failures\tIS_CAUSED_BY\tHigh Blood Pressure\tDisease-Disease\n\
             Heart Failure\tHAS_SYMPTOMS\tShortness of Breath\tDisease-Other\n\
             Heart Failure\tHAS_SYMPTOM\tShortness of breath\tDisease-Other\n",
            0.6,
        );
        let again = normalize_kg(&g.to_raw(), &CrossRefTable::new(), &NormalizeConfig { theta: 0.6, relation_theta: None }).unwrap();
        assert_eq!(g, again);
        assert!(kg_stats(&g).triples < 4);
    }
}
