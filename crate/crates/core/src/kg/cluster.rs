//! Average-linkage agglomerative clustering on cosine similarity with
//! cannot-link constraints between different normalized codes.
//!
//! The merge sequence does not depend on the threshold (always the most
//! similar admissible pair, ties to the lexicographically smallest pair), and
//! merging stops at the first step whose best similarity is below θ. A higher
//! θ therefore stops on a prefix of the same sequence and refines the lower-θ
//! result.

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use super::{Category, Embedder, Entity, KgError, Result};

/// Largest double below 1. Similarities of non-identical vectors are capped
/// here so that θ = 1 merges only bitwise-identical embeddings.
const BELOW_ONE: f64 = 1.0 - f64::EPSILON / 2.0;

/// Cosine similarity, exactly 1 for bitwise-identical vectors and capped
/// just below 1 otherwise; 0 when either vector is zero.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    if a == b {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = libm::sqrt(a.iter().map(|x| x * x).sum());
    let nb = libm::sqrt(b.iter().map(|x| x * x).sum());
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na * nb)).clamp(-1.0, BELOW_ONE)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clustering {
    /// Item positions per cluster, each sorted; clusters ordered by their
    /// smallest member.
    pub clusters: Vec<Vec<usize>>,
    /// Cluster index per item.
    pub assignment: Vec<usize>,
}

impl Clustering {
    fn from_groups(n: usize, mut clusters: Vec<Vec<usize>>) -> Self {
        for c in &mut clusters {
            c.sort_unstable();
        }
        clusters.sort_unstable_by_key(|c| c[0]);
        let mut assignment = vec![0; n];
        for (k, c) in clusters.iter().enumerate() {
            for &i in c {
                assignment[i] = k;
            }
        }
        Self { clusters, assignment }
    }
}

fn check_threshold(theta: f64) -> Result<()> {
    if (0.0..=1.0).contains(&theta) {
        Ok(())
    } else {
        Err(KgError::InvalidThreshold(theta))
    }
}

/// Core loop. `groups` are the initial clusters over `n` items; `codes` tags
/// each group with an optional code, and groups with different codes never
/// merge. `sim(i, j)` is the item similarity, `ident(i, j)` whether the two
/// items have identical embeddings.
fn agglomerate_groups(
    n: usize,
    sim: &dyn Fn(usize, usize) -> f64,
    ident: &dyn Fn(usize, usize) -> bool,
    groups: Vec<Vec<usize>>,
    mut codes: Vec<Option<String>>,
    theta: f64,
) -> Vec<Vec<usize>> {
    let k = groups.len();
    let mut members = groups;
    let mut s = vec![f64::NEG_INFINITY; k * k];
    let mut same = vec![false; k * k];
    for a in 0..k {
        for b in (a + 1)..k {
            let conflict = matches!((&codes[a], &codes[b]), (Some(x), Some(y)) if x != y);
            let (mut tot, mut all) = (0.0, true);
            for &i in &members[a] {
                for &j in &members[b] {
                    tot += sim(i, j);
                    all &= ident(i, j);
                }
            }
            let avg = tot / (members[a].len() * members[b].len()) as f64;
            let v = if conflict {
                f64::NEG_INFINITY
            } else if all {
                1.0
            } else {
                avg.min(BELOW_ONE)
            };
            s[a * k + b] = v;
            s[b * k + a] = v;
            same[a * k + b] = all;
            same[b * k + a] = all;
        }
    }
    let mut active = vec![true; k];
    let row_best = |s: &[f64], active: &[bool], a: usize| -> (f64, usize) {
        let mut best = (f64::NEG_INFINITY, usize::MAX);
        for c in 0..k {
            if c != a && active[c] && s[a * k + c] > best.0 {
                best = (s[a * k + c], c);
            }
        }
        best
    };
    let mut best: Vec<(f64, usize)> = (0..k).map(|a| row_best(&s, &active, a)).collect();
    loop {
        let mut pick: Option<usize> = None;
        for a in 0..k {
            if active[a] && best[a].1 != usize::MAX && pick.is_none_or(|p| best[a].0 > best[p].0) {
                pick = Some(a);
            }
        }
        let Some(a) = pick else { break };
        let (v, b) = best[a];
        if v < theta || v == f64::NEG_INFINITY {
            break;
        }
        let (a, b) = (a.min(b), a.max(b));
        let (na, nb) = (members[a].len() as f64, members[b].len() as f64);
        for c in 0..k {
            if !active[c] || c == a || c == b {
                continue;
            }
            let all = same[a * k + c] && same[b * k + c];
            let v = (na * s[a * k + c] + nb * s[b * k + c]) / (na + nb);
            let v = if v == f64::NEG_INFINITY {
                v
            } else if all {
                1.0
            } else {
                v.min(BELOW_ONE)
            };
            s[a * k + c] = v;
            s[c * k + a] = v;
            same[a * k + c] = all;
            same[c * k + a] = all;
        }
        let moved = core::mem::take(&mut members[b]);
        members[a].extend(moved);
        if codes[a].is_none() {
            codes[a] = codes[b].take();
        }
        active[b] = false;
        best[a] = row_best(&s, &active, a);
        for c in 0..k {
            if !active[c] || c == a {
                continue;
            }
            if best[c].1 == a || best[c].1 == b {
                best[c] = row_best(&s, &active, c);
            } else {
                let v = s[c * k + a];
                if v > best[c].0 || (v == best[c].0 && a < best[c].1) {
                    best[c] = (v, a);
                }
            }
        }
    }
    let _ = n;
    members.into_iter().filter(|m| !m.is_empty()).collect()
}

/// Clusters items given a dense similarity matrix; entries equal to 1 are
/// treated as identical embeddings.
pub fn agglomerate(sim: &[Vec<f64>], theta: f64) -> Result<Clustering> {
    check_threshold(theta)?;
    let n = sim.len();
    let groups = (0..n).map(|i| vec![i]).collect();
    let clusters = agglomerate_groups(
        n,
        &|i, j| sim[i][j],
        &|i, j| sim[i][j] == 1.0,
        groups,
        vec![None; n],
        theta,
    );
    Ok(Clustering::from_groups(n, clusters))
}

/// Clusters entities of one category by surface similarity.
///
/// Entities sharing a normalized code start in the same cluster; clusters
/// holding different codes are never merged. Positions in the result refer
/// to the input slice. Returns the clustering and the canonical entity
/// position per cluster (lowest id carrying a code, else lowest id).
pub fn cluster_entities(
    entities: &[Entity],
    embedder: &dyn Embedder,
    theta: f64,
    category: Category,
) -> Result<(Clustering, Vec<usize>)> {
    check_threshold(theta)?;
    if let Some(e) = entities.iter().find(|e| e.category != category) {
        return Err(KgError::InvalidGraph(alloc::format!(
            "entity {} is {} but clustering {}",
            e.id,
            e.category,
            category
        )));
    }
    let vecs: Vec<Vec<f64>> = entities.iter().map(|e| embedder.embed(&e.surface)).collect();
    let clustering = cluster_vectors(&vecs, entities.iter().map(|e| e.code.clone()).collect(), theta);
    let canonical = clustering
        .clusters
        .iter()
        .map(|c| {
            let coded = c.iter().copied().filter(|&i| entities[i].code.is_some()).min_by_key(|&i| entities[i].id);
            coded.unwrap_or_else(|| *c.iter().min_by_key(|&&i| entities[i].id).expect("non-empty"))
        })
        .collect();
    Ok((clustering, canonical))
}

/// Clustering over precomputed embeddings with per-item optional codes.
pub(crate) fn cluster_vectors(vecs: &[Vec<f64>], codes: Vec<Option<String>>, theta: f64) -> Clustering {
    let n = vecs.len();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    let mut group_codes: Vec<Option<String>> = Vec::new();
    for (i, code) in codes.into_iter().enumerate() {
        match code {
            Some(c) => match group_codes.iter().position(|g| g.as_deref() == Some(c.as_str())) {
                Some(g) => groups[g].push(i),
                None => {
                    groups.push(vec![i]);
                    group_codes.push(Some(c));
                }
            },
            None => {
                groups.push(vec![i]);
                group_codes.push(None);
            }
        }
    }
    let mut cache = vec![f64::NAN; n * n];
    for i in 0..n {
        for j in i..n {
            let v = if i == j { 1.0 } else { cosine(&vecs[i], &vecs[j]) };
            cache[i * n + j] = v;
            cache[j * n + i] = v;
        }
    }
    let clusters = agglomerate_groups(
        n,
        &|i, j| cache[i * n + j],
        &|i, j| vecs[i] == vecs[j],
        groups,
        group_codes,
        theta,
    );
    Clustering::from_groups(n, clusters)
}
