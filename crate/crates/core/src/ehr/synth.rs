//! Planted-structure EHR generator.
//!
//! Diseases fall into latent clusters, and each cluster holds a few parent
//! groups (a two-level code hierarchy). Every lab has a home cluster; a
//! disease has affinity only to labs of its own cluster. A patient's
//! admissions walk between clusters: the next admission stays in the current
//! cluster with probability `progression`, otherwise it moves to a uniformly
//! chosen other cluster. Diseases of an admission are drawn from its cluster
//! with Zipf weights. Lab `l` fires with probability
//! `bg + (1 − bg)·(1 − Π_d (1 − s·aff[d][l]))` over the admission's diseases.

use alloc::collections::BTreeSet;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::Rng;

use super::{Admission, EhrDataset, EhrError, LabEntry, Patient, Result, Vocab, VocabFile};
use crate::kg::KnowledgeGraph;
use crate::kge::hierarchy_graph;
use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticConfig {
    pub patients: usize,
    pub diseases: usize,
    /// `[|L1|, |L2|, |L3|]`.
    pub labs: [usize; 3],
    pub clusters: usize,
    pub parents_per_cluster: usize,
    /// Levels of the disease hierarchy; only 2 is supported.
    pub depth: usize,
    pub affinity: f64,
    pub progression: f64,
    /// Probability that a lab is abnormal regardless of diseases.
    pub background: f64,
    /// Fraction of a disease's home-cluster labs it has affinity to.
    pub affinity_density: f64,
    /// Exponent `s` of the within-cluster disease weights `1 / rank^s`.
    pub zipf_exponent: f64,
    pub mean_admissions: f64,
    pub max_admissions: usize,
    pub max_codes: usize,
    /// Number of marker codes taken from the heart-failure cluster.
    pub hf_markers: usize,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            patients: 750,
            diseases: 120,
            labs: [42, 29, 4],
            clusters: 6,
            parents_per_cluster: 2,
            depth: 2,
            affinity: 0.8,
            progression: 0.7,
            background: 0.02,
            affinity_density: 0.5,
            zipf_exponent: 1.5,
            mean_admissions: 2.66,
            max_admissions: 10,
            max_codes: 5,
            hf_markers: 2,
            seed: 0,
        }
    }
}

impl SyntheticConfig {
    pub fn validate(&self) -> Result<()> {
        let e = EhrError::ConfigInvalid;
        if self.patients == 0 || self.labs.contains(&0) || self.clusters == 0 || self.parents_per_cluster == 0 {
            return Err(e("all counts must be at least 1"));
        }
        if self.diseases < self.clusters * self.parents_per_cluster {
            return Err(e("every parent needs at least one disease"));
        }
        if self.depth != 2 {
            return Err(e("only a two-level hierarchy is supported"));
        }
        for s in [self.affinity, self.progression, self.background, self.affinity_density] {
            if !(0.0..=1.0).contains(&s) {
                return Err(e("strengths and rates must lie in [0, 1]"));
            }
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(e("zipf exponent must be finite and non-negative"));
        }
        if self.max_admissions == 0 || self.max_codes == 0 {
            return Err(e("all counts must be at least 1"));
        }
        if !(self.mean_admissions >= 1.0 && self.mean_admissions < (self.max_admissions as f64 + 1.0) / 2.0)
            && !(self.max_admissions == 1 && self.mean_admissions == 1.0)
        {
            return Err(e("mean admissions must lie in [1, (max + 1) / 2)"));
        }
        if self.hf_markers == 0 || self.hf_markers > self.diseases / self.clusters {
            return Err(e("hf markers must be between 1 and the smallest cluster size"));
        }
        Ok(())
    }
}

/// Planted structure behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticTruth {
    pub disease_cluster: Vec<usize>,
    pub disease_parent: Vec<usize>,
    /// ICD-9 style three-digit code of each parent group.
    pub parent_codes: Vec<String>,
    pub parent_cluster: Vec<usize>,
    pub lab_cluster: Vec<usize>,
    /// `aff[d][l]` in `[0, 1]`.
    pub affinity: Vec<Vec<f64>>,
    pub hf_cluster: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: EhrDataset,
    pub hf_codes: Vec<String>,
    pub truth: SyntheticTruth,
}

/// Truncated geometric pmf on `1..=max` with the given mean, found by
/// bisection on the success probability.
fn truncated_geometric(mean: f64, max: usize) -> Vec<f64> {
    let pmf = |p: f64| -> Vec<f64> {
        let w: Vec<f64> = (0..max).map(|k| libm::pow(1.0 - p, k as f64) * p).collect();
        let z: f64 = w.iter().sum();
        w.into_iter().map(|x| x / z).collect()
    };
    let mean_of = |w: &[f64]| w.iter().enumerate().map(|(k, x)| (k + 1) as f64 * x).sum::<f64>();
    let (mut lo, mut hi) = (1e-9, 1.0);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_of(&pmf(mid)) > mean {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    pmf(0.5 * (lo + hi))
}

fn sample_without_replacement<R: Rng>(rng: &mut R, items: &[usize], weights: &[f64], n: usize) -> Vec<usize> {
    let mut items = items.to_vec();
    let mut weights = weights.to_vec();
    let mut out = Vec::with_capacity(n);
    while out.len() < n && !items.is_empty() {
        let i = WeightedIndex::new(&weights).expect("positive weights").sample(rng);
        out.push(items.swap_remove(i));
        weights.swap_remove(i);
    }
    out
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    cfg.validate()?;
    let mut rng = seeded(cfg.seed);
    let c = cfg.clusters;
    let n_parents = c * cfg.parents_per_cluster;

    // parent p belongs to cluster p / parents_per_cluster; diseases are dealt
    // round robin over parents in a shuffled order
    let mut order: Vec<usize> = (0..cfg.diseases).collect();
    order.shuffle(&mut rng);
    let mut disease_parent = vec![0; cfg.diseases];
    for (slot, &d) in order.iter().enumerate() {
        disease_parent[d] = slot % n_parents;
    }
    let parent_cluster: Vec<usize> = (0..n_parents).map(|p| p / cfg.parents_per_cluster).collect();
    let disease_cluster: Vec<usize> = disease_parent.iter().map(|&p| parent_cluster[p]).collect();
    let parent_codes: Vec<String> = (0..n_parents).map(|p| alloc::format!("{:03}", 100 + p)).collect();
    let mut within = vec![0usize; n_parents];
    let codes: Vec<String> = (0..cfg.diseases)
        .map(|d| {
            let p = disease_parent[d];
            within[p] += 1;
            alloc::format!("{}.{}", parent_codes[p], within[p] - 1)
        })
        .collect();

    let mut labs = Vec::new();
    for (cat, &n) in cfg.labs.iter().enumerate() {
        let prefix = ["H", "C", "G"][cat];
        for j in 0..n {
            labs.push(LabEntry {
                code: alloc::format!("{prefix}{:03}", j + 1),
                category: cat as u8 + 1,
            });
        }
    }
    let n_labs = labs.len();
    let lab_cluster: Vec<usize> = (0..n_labs).map(|_| rng.random_range(0..c)).collect();
    let mut affinity = vec![vec![0.0; n_labs]; cfg.diseases];
    for d in 0..cfg.diseases {
        let home: Vec<usize> = (0..n_labs).filter(|&l| lab_cluster[l] == disease_cluster[d]).collect();
        for &l in &home {
            if rng.random::<f64>() < cfg.affinity_density {
                affinity[d][l] = rng.random_range(0.5..=1.0);
            }
        }
    }

    // members of each cluster in a fixed random order carry Zipf weights
    let mut members: Vec<Vec<usize>> = vec![Vec::new(); c];
    for d in 0..cfg.diseases {
        members[disease_cluster[d]].push(d);
    }
    for m in &mut members {
        m.shuffle(&mut rng);
    }
    let zipf: Vec<Vec<f64>> = members
        .iter()
        .map(|m| (0..m.len()).map(|j| libm::pow((j + 1) as f64, -cfg.zipf_exponent)).collect())
        .collect();
    let hf_cluster = rng.random_range(0..c);
    let hf_ids: Vec<usize> = members[hf_cluster][..cfg.hf_markers].to_vec();

    let adm_count = WeightedIndex::new(truncated_geometric(cfg.mean_admissions, cfg.max_admissions)).expect("valid pmf");
    let mut patients = Vec::with_capacity(cfg.patients);
    for i in 0..cfg.patients {
        let t = adm_count.sample(&mut rng) + 1;
        let mut cluster = rng.random_range(0..c);
        let mut admissions = Vec::with_capacity(t);
        for step in 0..t {
            if step > 0 && c > 1 && rng.random::<f64>() >= cfg.progression {
                let other = rng.random_range(0..c - 1);
                cluster = if other >= cluster { other + 1 } else { other };
            }
            let n = rng.random_range(1..=cfg.max_codes);
            let diseases = sample_without_replacement(&mut rng, &members[cluster], &zipf[cluster], n);
            let mut fired = BTreeSet::new();
            for l in 0..n_labs {
                let miss: f64 = diseases.iter().map(|&d| 1.0 - cfg.affinity * affinity[d][l]).product();
                let p = cfg.background + (1.0 - cfg.background) * (1.0 - miss);
                if rng.random::<f64>() < p {
                    fired.insert(l);
                }
            }
            admissions.push(Admission {
                diseases,
                labs: fired.into_iter().collect(),
            });
        }
        patients.push(Patient {
            id: alloc::format!("P{:05}", i + 1),
            admissions,
        });
    }

    let vocab = Vocab::new(VocabFile {
        diseases: codes.clone(),
        labs,
    })?;
    Ok(SyntheticData {
        dataset: EhrDataset { vocab, patients },
        hf_codes: hf_ids.iter().map(|&d| codes[d].clone()).collect(),
        truth: SyntheticTruth {
            disease_cluster,
            disease_parent,
            parent_codes,
            parent_cluster,
            lab_cluster,
            affinity,
            hf_cluster,
        },
    })
}

/// Disease hierarchy matching the planted groups: every disease is a leaf
/// under its parent code, with entity codes equal to vocabulary codes.
pub fn synthetic_hierarchy(vocab: &Vocab, truth: &SyntheticTruth) -> KnowledgeGraph {
    let leaves = vocab
        .diseases()
        .iter()
        .map(|code| (alloc::format!("condition {code}"), Some(code.clone())))
        .collect();
    let parents = truth
        .parent_codes
        .iter()
        .map(|code| (alloc::format!("group {code}"), Some(code.clone())))
        .collect();
    hierarchy_graph(&truth.disease_parent, leaves, parents)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kg::valid_code;
    use crate::kg::CodeSystem;

    fn small() -> SyntheticConfig {
        SyntheticConfig {
            patients: 200,
            ..Default::default()
        }
    }

    #[test]
    fn geometric_mean_matches() {
        let w = truncated_geometric(2.66, 10);
        let m: f64 = w.iter().enumerate().map(|(k, x)| (k + 1) as f64 * x).sum();
        assert!((m - 2.66).abs() < 1e-9);
        assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn deterministic() {
        assert_eq!(generate_synthetic(&small()).unwrap(), generate_synthetic(&small()).unwrap());
        let other = SyntheticConfig { seed: 1, ..small() };
        assert_ne!(generate_synthetic(&small()).unwrap().dataset, generate_synthetic(&other).unwrap().dataset);
    }

    #[test]
    fn codes_are_icd9_shaped() {
        let s = generate_synthetic(&small()).unwrap();
        for c in s.dataset.vocab.diseases().iter().chain(&s.truth.parent_codes) {
            assert!(valid_code(CodeSystem::Icd9, c), "{c}");
        }
        assert_eq!(s.dataset.vocab.category_sizes(), [42, 29, 4]);
        assert_eq!(s.hf_codes.len(), 2);
    }

    #[test]
    fn full_progression_stays_in_one_cluster() {
        let s = generate_synthetic(&SyntheticConfig {
            progression: 1.0,
            ..small()
        })
        .unwrap();
        for p in &s.dataset.patients {
            let cl: BTreeSet<usize> = p
                .admissions
                .iter()
                .flat_map(|a| a.diseases.iter().map(|&d| s.truth.disease_cluster[d]))
                .collect();
            assert_eq!(cl.len(), 1);
        }
    }

    #[test]
    fn hierarchy_matches_vocab() {
        let s = generate_synthetic(&small()).unwrap();
        let g = synthetic_hierarchy(&s.dataset.vocab, &s.truth);
        for (d, code) in s.dataset.vocab.diseases().iter().enumerate() {
            let e = g.entity_by_code(code).unwrap();
            assert_eq!(e.id, d);
        }
    }

    #[test]
    fn rejects_bad_config() {
        for cfg in [
            SyntheticConfig { patients: 0, ..small() },
            SyntheticConfig { affinity: 1.5, ..small() },
            SyntheticConfig { depth: 3, ..small() },
            SyntheticConfig { diseases: 3, ..small() },
        ] {
            assert!(matches!(generate_synthetic(&cfg), Err(EhrError::ConfigInvalid(_))));
        }
    }
}
