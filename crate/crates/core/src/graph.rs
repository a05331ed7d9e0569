//! Disease–lab co-occurrence counts `B` and the mixed adjacency
//! `A = (1−φ)·B + φ·I` that drives the encoder's graph layers.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec::Vec;

use crate::ehr::EhrDataset;
use crate::nn::{Matrix, SparsePattern};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum GraphError {
    #[error("concept {0} is outside the vocabulary")]
    UnknownCode(usize),
    #[error("self-loop weight {0} outside [0, 1]")]
    PhiOutOfRange(f64),
    #[error("graphs over {0} and {1} nodes cannot be combined")]
    SizeMismatch(usize, usize),
}

pub type Result<T> = core::result::Result<T, GraphError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphOptions {
    pub disease_lab: bool,
    pub lab_lab: bool,
    /// Count each pair at most once per patient instead of once per admission.
    pub per_patient_dedup: bool,
}

impl Default for GraphOptions {
    fn default() -> Self {
        Self {
            disease_lab: true,
            lab_lab: false,
            per_patient_dedup: false,
        }
    }
}

/// Symmetric co-occurrence counts in compressed-row form, zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CoOccurrence {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
    counts: Vec<u64>,
}

impl CoOccurrence {
    /// Builds from upper-triangle counts keyed `(i, j)` with `i < j`.
    fn from_pairs(n: usize, pairs: &BTreeMap<(usize, usize), u64>) -> Self {
        let mut rows: Vec<Vec<(usize, u64)>> = alloc::vec![Vec::new(); n];
        for (&(i, j), &c) in pairs {
            rows[i].push((j, c));
            rows[j].push((i, c));
        }
        let mut offsets = Vec::with_capacity(n + 1);
        offsets.push(0);
        let (mut cols, mut counts) = (Vec::new(), Vec::new());
        for mut r in rows {
            r.sort_unstable();
            for (j, c) in r {
                cols.push(j);
                counts.push(c);
            }
            offsets.push(cols.len());
        }
        Self { n, offsets, cols, counts }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> (&[usize], &[u64]) {
        let r = self.offsets[i]..self.offsets[i + 1];
        (&self.cols[r.clone()], &self.counts[r])
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        let (cols, counts) = self.row(i);
        cols.binary_search(&j).map(|k| counts[k]).unwrap_or(0)
    }

    /// Every stored entry `(row, col, count)` in row-major order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, usize, u64)> + '_ {
        (0..self.n).flat_map(move |i| {
            let (cols, counts) = self.row(i);
            cols.iter().zip(counts).map(move |(&j, &c)| (i, j, c))
        })
    }

    pub fn from_entries(n: usize, entries: impl IntoIterator<Item = (usize, usize, u64)>) -> Result<Self> {
        let mut pairs = BTreeMap::new();
        for (i, j, c) in entries {
            if i >= n || j >= n {
                return Err(GraphError::UnknownCode(i.max(j)));
            }
            if i < j && c > 0 {
                *pairs.entry((i, j)).or_insert(0) += c;
            }
        }
        Ok(Self::from_pairs(n, &pairs))
    }

    /// Entry-wise sum.
    pub fn add(&self, other: &CoOccurrence) -> Result<CoOccurrence> {
        if self.n != other.n {
            return Err(GraphError::SizeMismatch(self.n, other.n));
        }
        let mut pairs = BTreeMap::new();
        for (i, j, c) in self.entries().chain(other.entries()) {
            if i < j {
                *pairs.entry((i, j)).or_insert(0) += c;
            }
        }
        Ok(Self::from_pairs(self.n, &pairs))
    }

    pub fn to_dense(&self) -> Matrix {
        let mut m = Matrix::zeros(self.n, self.n);
        for (i, j, c) in self.entries() {
            m.set(i, j, c as f64);
        }
        m
    }
}

/// Counts code pairs within every admission: disease–disease always,
/// disease–lab and lab–lab as configured. Concept ids follow the dataset
/// vocabulary (diseases first, then labs).
pub fn build_cooccurrence(ds: &EhrDataset, opts: GraphOptions) -> Result<CoOccurrence> {
    let v = &ds.vocab;
    let n = v.n_concepts();
    let nd = v.n_diseases();
    let mut pairs: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    for p in &ds.patients {
        let mut seen = BTreeSet::new();
        for a in &p.admissions {
            let codes = a.concepts(v);
            if let Some(&bad) = codes.iter().find(|&&c| c >= n) {
                return Err(GraphError::UnknownCode(bad));
            }
            for (x, &i) in codes.iter().enumerate() {
                for &j in &codes[x + 1..] {
                    let labs = (i >= nd) as u8 + (j >= nd) as u8;
                    let keep = match labs {
                        0 => true,
                        1 => opts.disease_lab,
                        _ => opts.lab_lab,
                    };
                    if !keep || i == j {
                        continue;
                    }
                    let key = (i.min(j), i.max(j));
                    if opts.per_patient_dedup && !seen.insert(key) {
                        continue;
                    }
                    *pairs.entry(key).or_insert(0) += 1;
                }
            }
        }
    }
    Ok(CoOccurrence::from_pairs(n, &pairs))
}

/// `A = (1−φ)·B + φ·I` on a sparse pattern that always includes the
/// diagonal, plus the row-normalized `Â`.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    pub phi: f64,
    /// Off-diagonal nonzeros of `A` plus every diagonal position.
    pub pattern: SparsePattern,
    /// `A` values aligned with `pattern`.
    pub a: Vec<f64>,
    /// `Â` values aligned with `pattern`; each row sums to 1.
    pub a_hat: Vec<f64>,
}

pub fn assemble_adjacency(b: &CoOccurrence, phi: f64) -> Result<Adjacency> {
    if !(0.0..=1.0).contains(&phi) {
        return Err(GraphError::PhiOutOfRange(phi));
    }
    let n = b.n();
    let mut rows = Vec::with_capacity(n);
    let mut vals: Vec<Vec<(usize, f64)>> = Vec::with_capacity(n);
    for i in 0..n {
        let (cols, counts) = b.row(i);
        let mut r: Vec<(usize, f64)> = cols
            .iter()
            .zip(counts)
            .map(|(&j, &c)| (j, (1.0 - phi) * c as f64))
            .filter(|&(_, a)| a != 0.0)
            .collect();
        r.push((i, phi));
        r.sort_unstable_by_key(|&(j, _)| j);
        rows.push(r.iter().map(|&(j, _)| j).collect::<Vec<_>>());
        vals.push(r);
    }
    let pattern = SparsePattern::from_rows(n, &rows);
    let mut a = Vec::with_capacity(pattern.nnz());
    let mut a_hat = Vec::with_capacity(pattern.nnz());
    for (i, r) in vals.iter().enumerate() {
        let sum: f64 = r.iter().map(|&(_, x)| x).sum();
        for &(j, x) in r {
            a.push(x);
            a_hat.push(if sum > 0.0 {
                x / sum
            } else if i == j {
                1.0
            } else {
                0.0
            });
        }
    }
    Ok(Adjacency { phi, pattern, a, a_hat })
}

impl Adjacency {
    pub fn n(&self) -> usize {
        self.pattern.n_rows()
    }

    fn dense(&self, values: &[f64]) -> Matrix {
        let mut m = Matrix::zeros(self.n(), self.n());
        for i in 0..self.n() {
            for (k, &j) in self.pattern.row_range(i).zip(self.pattern.row(i)) {
                m.set(i, j, values[k]);
            }
        }
        m
    }

    pub fn a_dense(&self) -> Matrix {
        self.dense(&self.a)
    }

    pub fn a_hat_dense(&self) -> Matrix {
        self.dense(&self.a_hat)
    }

    /// Additive attention bias `ln(1 + A_ij)` for the edge-weighted
    /// attention variant; finite even where `A_ij = 0` on the diagonal.
    pub fn log_bias(&self) -> Vec<f64> {
        self.a.iter().map(|&x| libm::log1p(x)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ehr::{EhrDataset, LabEntry, RawAdmission, RawPatient, Vocab, VocabFile};
    use alloc::string::{String, ToString};
    use alloc::vec;

    fn ds(adms: &[(&[&str], &[&str])]) -> EhrDataset {
        let vocab = Vocab::new(VocabFile {
            diseases: vec!["d1".into(), "d2".into(), "d3".into()],
            labs: vec![
                LabEntry { code: "l1".into(), category: 1 },
                LabEntry { code: "l2".into(), category: 2 },
            ],
        })
        .unwrap();
        let p = RawPatient {
            id: "p".into(),
            admissions: adms
                .iter()
                .map(|(d, l)| RawAdmission {
                    diseases: d.iter().map(|s| s.to_string()).collect(),
                    abnormal_labs: l.iter().map(|s| s.to_string()).collect::<Vec<String>>(),
                })
                .collect(),
        };
        EhrDataset::from_raw(vocab, [(1, p)]).unwrap()
    }

    #[test]
    fn single_admission_pairs() {
        let b = build_cooccurrence(&ds(&[(&["d1", "d2"], &["l1"])]), GraphOptions::default()).unwrap();
        let expect = [(0, 1), (1, 0), (0, 3), (3, 0), (1, 3), (3, 1)];
        for i in 0..5 {
            for j in 0..5 {
                assert_eq!(b.get(i, j), expect.contains(&(i, j)) as u64, "{i} {j}");
            }
        }
    }

    #[test]
    fn lab_lab_only_when_enabled() {
        let d = ds(&[(&["d1"], &["l1", "l2"])]);
        assert_eq!(build_cooccurrence(&d, GraphOptions::default()).unwrap().get(3, 4), 0);
        let opts = GraphOptions { lab_lab: true, ..Default::default() };
        assert_eq!(build_cooccurrence(&d, opts).unwrap().get(3, 4), 1);
        let opts = GraphOptions { disease_lab: false, ..Default::default() };
        assert_eq!(build_cooccurrence(&d, opts).unwrap().nnz(), 0);
    }

    #[test]
    fn repeats_and_dedup() {
        let d = ds(&[(&["d1", "d2"], &[]), (&["d1", "d2"], &[]), (&["d3"], &[])]);
        let b = build_cooccurrence(&d, GraphOptions::default()).unwrap();
        assert_eq!((b.get(0, 1), b.nnz()), (2, 2));
        let opts = GraphOptions { per_patient_dedup: true, ..Default::default() };
        assert_eq!(build_cooccurrence(&d, opts).unwrap().get(0, 1), 1);
    }

    #[test]
    fn adjacency_examples() {
        let b = CoOccurrence::from_entries(2, [(0, 1, 2), (1, 0, 2)]).unwrap();
        let adj = assemble_adjacency(&b, 0.5).unwrap();
        assert_eq!(adj.a_dense(), Matrix::from_rows(&[&[0.5, 1.0], &[1.0, 0.5]]).unwrap());
        let adj = assemble_adjacency(&b, 1.0).unwrap();
        assert_eq!(adj.a_dense(), Matrix::identity(2));
        assert_eq!(adj.pattern.nnz(), 2);
        let iso = CoOccurrence::from_entries(3, [(0, 1, 1)]).unwrap();
        let adj = assemble_adjacency(&iso, 0.0).unwrap();
        assert_eq!(adj.a_hat_dense().row(2), &[0.0, 0.0, 1.0]);
        assert_eq!(adj.a_hat_dense().row(0), &[0.0, 1.0, 0.0]);
        assert!(matches!(assemble_adjacency(&iso, 1.5), Err(GraphError::PhiOutOfRange(_))));
    }

    #[test]
    fn add_is_entrywise() {
        let x = CoOccurrence::from_entries(3, [(0, 1, 1), (1, 2, 4)]).unwrap();
        let y = CoOccurrence::from_entries(3, [(0, 1, 2), (0, 2, 1)]).unwrap();
        let mut dense = x.to_dense();
        dense.add_assign(&y.to_dense()).unwrap();
        assert_eq!(x.add(&y).unwrap().to_dense(), dense);
    }
}
