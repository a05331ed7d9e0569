//! Two-level synthetic hierarchies for embedding tests and encoder priors.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use super::IdTriple;
use crate::kg::{Category, Entity, KnowledgeGraph, Relation, Source, Triple};
use crate::rng::seeded;

pub const IS_A: usize = 0;
pub const LINKED_TO: usize = 1;
pub const SIBLING_OF: usize = 2;

/// Builds a two-level graph: leaf `i` has parent `leaf_parent[i]`.
///
/// Entities are the leaves (ids `0..L`) followed by the parents. Triples:
/// `leaf is_a parent`; `sibling_of` in both directions between every pair of
/// leaves sharing a parent; `leaf linked_to next-parent` where the next
/// parent is `(p + 1) mod P`.
pub fn hierarchy_graph(
    leaf_parent: &[usize],
    leaves: Vec<(String, Option<String>)>,
    parents: Vec<(String, Option<String>)>,
) -> KnowledgeGraph {
    let n_leaves = leaf_parent.len();
    let n_parents = parents.len();
    let mut entities: Vec<Entity> = Vec::with_capacity(n_leaves + n_parents);
    for (surface, code) in leaves.into_iter().chain(parents) {
        entities.push(Entity {
            id: entities.len(),
            surface,
            category: Category::Disease,
            code,
        });
    }
    let relations = ["is_a", "linked_to", "sibling_of"]
        .iter()
        .enumerate()
        .map(|(id, l)| Relation { id, label: (*l).into() })
        .collect();
    let mut triples = Vec::new();
    let t = |head, relation, tail| Triple {
        head,
        relation,
        tail,
        source: Source::Ontology,
    };
    for (leaf, &p) in leaf_parent.iter().enumerate() {
        triples.push(t(leaf, IS_A, n_leaves + p));
        if n_parents > 1 {
            triples.push(t(leaf, LINKED_TO, n_leaves + (p + 1) % n_parents));
        }
    }
    for p in 0..n_parents {
        let group: Vec<usize> = (0..n_leaves).filter(|&l| leaf_parent[l] == p).collect();
        for &a in &group {
            for &b in &group {
                if a != b {
                    triples.push(t(a, SIBLING_OF, b));
                }
            }
        }
    }
    KnowledgeGraph::from_parts(entities, relations, triples).expect("well-formed by construction")
}

/// `n_parents` parents with `leaves_per_parent` leaves each.
pub fn toy_hierarchy(n_parents: usize, leaves_per_parent: usize) -> KnowledgeGraph {
    let leaf_parent: Vec<usize> = (0..n_parents * leaves_per_parent).map(|i| i / leaves_per_parent).collect();
    let leaves = (0..leaf_parent.len()).map(|i| (alloc::format!("leaf {i}"), None)).collect();
    let parents = (0..n_parents).map(|p| (alloc::format!("parent {p}"), None)).collect();
    hierarchy_graph(&leaf_parent, leaves, parents)
}

/// Seeded shuffle split. Test triples mentioning an entity or relation that
/// never occurs in the training part are moved back into it, so every test
/// query concerns embeddings that received training signal.
pub fn split_triples(triples: &[IdTriple], test_frac: f64, seed: u64) -> (Vec<IdTriple>, Vec<IdTriple>) {
    let mut all = triples.to_vec();
    all.shuffle(&mut seeded(seed));
    let n_test = libm::round(test_frac * all.len() as f64) as usize;
    let n_test = n_test.min(all.len());
    let candidates = all.split_off(all.len() - n_test);
    let mut train = all;
    let mut ents: BTreeSet<usize> = train.iter().flat_map(|&(h, _, t)| [h, t]).collect();
    let mut rels: BTreeSet<usize> = train.iter().map(|&(_, r, _)| r).collect();
    let mut test = Vec::new();
    for tr in candidates {
        let (h, r, t) = tr;
        if ents.contains(&h) && ents.contains(&t) && rels.contains(&r) {
            test.push(tr);
        } else {
            ents.insert(h);
            ents.insert(t);
            rels.insert(r);
            train.push(tr);
        }
    }
    (train, test)
}
