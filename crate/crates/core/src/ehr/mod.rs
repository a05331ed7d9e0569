//! EHR data model: vocabularies, patients as ordered admissions, splitting,
//! and construction of proxy and downstream training samples.
//!
//! Concepts share one index space: disease `d` is concept `d`, lab `l` is
//! concept `|D| + l`.

mod synth;

pub use synth::{generate_synthetic, synthetic_hierarchy, SyntheticConfig, SyntheticData, SyntheticTruth};

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::string::String;
use alloc::vec::Vec;
use rand::seq::SliceRandom;

use crate::rng::seeded;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EhrError {
    #[error("unknown code {code} on line {line}")]
    UnknownCode { code: String, line: usize },
    #[error("admission without diseases on line {0}")]
    EmptyAdmission(usize),
    #[error("patient without admissions on line {0}")]
    NoAdmissions(usize),
    #[error("split ratios must be non-negative and sum to 1")]
    RatioInvalid,
    #[error("downstream samples need at least two admissions (patient {0})")]
    TooFewAdmissions(String),
    #[error("invalid synthetic config: {0}")]
    ConfigInvalid(&'static str),
    #[error("invalid vocabulary: {0}")]
    InvalidVocab(String),
}

pub type Result<T> = core::result::Result<T, EhrError>;

/// Lab categories are numbered 1, 2, 3 (hematology, chemistry, blood gas).
pub const LAB_CATEGORIES: usize = 3;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabEntry {
    pub code: String,
    pub category: u8,
}

/// Vocabulary sidecar contents.
#[derive(Debug, Clone, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VocabFile {
    pub diseases: Vec<String>,
    pub labs: Vec<LabEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    diseases: Vec<String>,
    labs: Vec<LabEntry>,
    disease_index: BTreeMap<String, usize>,
    lab_index: BTreeMap<String, usize>,
    /// Category-local position of every lab.
    lab_local: Vec<usize>,
    by_category: [Vec<usize>; LAB_CATEGORIES],
}

impl Vocab {
    pub fn new(file: VocabFile) -> Result<Self> {
        let mut disease_index = BTreeMap::new();
        for (i, c) in file.diseases.iter().enumerate() {
            if disease_index.insert(c.clone(), i).is_some() {
                return Err(EhrError::InvalidVocab(alloc::format!("duplicate disease {c}")));
            }
        }
        let mut lab_index = BTreeMap::new();
        let mut by_category: [Vec<usize>; LAB_CATEGORIES] = Default::default();
        let mut lab_local = Vec::with_capacity(file.labs.len());
        for (i, l) in file.labs.iter().enumerate() {
            if !(1..=LAB_CATEGORIES as u8).contains(&l.category) {
                return Err(EhrError::InvalidVocab(alloc::format!("lab {} has category {}", l.code, l.category)));
            }
            if disease_index.contains_key(&l.code) || lab_index.insert(l.code.clone(), i).is_some() {
                return Err(EhrError::InvalidVocab(alloc::format!("duplicate code {}", l.code)));
            }
            let cat = &mut by_category[l.category as usize - 1];
            lab_local.push(cat.len());
            cat.push(i);
        }
        Ok(Self {
            diseases: file.diseases,
            labs: file.labs,
            disease_index,
            lab_index,
            lab_local,
            by_category,
        })
    }

    pub fn to_file(&self) -> VocabFile {
        VocabFile {
            diseases: self.diseases.clone(),
            labs: self.labs.clone(),
        }
    }

    pub fn n_diseases(&self) -> usize {
        self.diseases.len()
    }

    pub fn n_labs(&self) -> usize {
        self.labs.len()
    }

    pub fn n_concepts(&self) -> usize {
        self.diseases.len() + self.labs.len()
    }

    pub fn diseases(&self) -> &[String] {
        &self.diseases
    }

    pub fn labs(&self) -> &[LabEntry] {
        &self.labs
    }

    pub fn disease_id(&self, code: &str) -> Option<usize> {
        self.disease_index.get(code).copied()
    }

    pub fn lab_id(&self, code: &str) -> Option<usize> {
        self.lab_index.get(code).copied()
    }

    pub fn lab_concept(&self, lab: usize) -> usize {
        self.diseases.len() + lab
    }

    /// Category (1..=3) and category-local index of a lab.
    pub fn lab_slot(&self, lab: usize) -> (u8, usize) {
        (self.labs[lab].category, self.lab_local[lab])
    }

    /// Lab ids of category `cat` (1..=3) in vocabulary order.
    pub fn category_labs(&self, cat: u8) -> &[usize] {
        &self.by_category[cat as usize - 1]
    }

    /// `[|L1|, |L2|, |L3|]`.
    pub fn category_sizes(&self) -> [usize; LAB_CATEGORIES] {
        [0, 1, 2].map(|i| self.by_category[i].len())
    }

    /// Code of a concept id.
    pub fn concept_code(&self, concept: usize) -> &str {
        if concept < self.diseases.len() {
            &self.diseases[concept]
        } else {
            &self.labs[concept - self.diseases.len()].code
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Admission {
    /// Disease ids in recorded order, without repeats.
    pub diseases: Vec<usize>,
    /// Abnormal lab ids, sorted.
    pub labs: Vec<usize>,
}

impl Admission {
    /// Concept ids of every code in the admission.
    pub fn concepts(&self, vocab: &Vocab) -> Vec<usize> {
        self.diseases
            .iter()
            .copied()
            .chain(self.labs.iter().map(|&l| vocab.lab_concept(l)))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Patient {
    pub id: String,
    pub admissions: Vec<Admission>,
}

/// Wire form of one patient, as stored one per line.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawPatient {
    pub id: String,
    pub admissions: Vec<RawAdmission>,
}

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAdmission {
    pub diseases: Vec<String>,
    #[serde(default)]
    pub abnormal_labs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EhrDataset {
    pub vocab: Vocab,
    pub patients: Vec<Patient>,
}

impl EhrDataset {
    /// Resolves and validates raw patients. `line` numbers are reported in
    /// errors and are 1-based positions of the records.
    pub fn from_raw(vocab: Vocab, raw: impl IntoIterator<Item = (usize, RawPatient)>) -> Result<Self> {
        let mut patients = Vec::new();
        for (line, rp) in raw {
            if rp.admissions.is_empty() {
                return Err(EhrError::NoAdmissions(line));
            }
            let mut admissions = Vec::with_capacity(rp.admissions.len());
            for ra in rp.admissions {
                let mut diseases = Vec::with_capacity(ra.diseases.len());
                for code in &ra.diseases {
                    let id = vocab.disease_id(code).ok_or_else(|| EhrError::UnknownCode {
                        code: code.clone(),
                        line,
                    })?;
                    if !diseases.contains(&id) {
                        diseases.push(id);
                    }
                }
                if diseases.is_empty() {
                    return Err(EhrError::EmptyAdmission(line));
                }
                let mut labs = BTreeSet::new();
                for code in &ra.abnormal_labs {
                    let id = vocab.lab_id(code).ok_or_else(|| EhrError::UnknownCode {
                        code: code.clone(),
                        line,
                    })?;
                    labs.insert(id);
                }
                admissions.push(Admission {
                    diseases,
                    labs: labs.into_iter().collect(),
                });
            }
            patients.push(Patient { id: rp.id, admissions });
        }
        Ok(Self { vocab, patients })
    }

    pub fn to_raw(&self) -> Vec<RawPatient> {
        self.patients
            .iter()
            .map(|p| RawPatient {
                id: p.id.clone(),
                admissions: p
                    .admissions
                    .iter()
                    .map(|a| RawAdmission {
                        diseases: a.diseases.iter().map(|&d| self.vocab.diseases[d].clone()).collect(),
                        abnormal_labs: a.labs.iter().map(|&l| self.vocab.labs[l].code.clone()).collect(),
                    })
                    .collect(),
            })
            .collect()
    }

    fn subset(&self, idx: &[usize]) -> Self {
        Self {
            vocab: self.vocab.clone(),
            patients: idx.iter().map(|&i| self.patients[i].clone()).collect(),
        }
    }

    pub fn admission_count(&self) -> usize {
        self.patients.iter().map(|p| p.admissions.len()).sum()
    }
}

/// Patient-level split. Validation and test receive only patients with at
/// least two admissions; their sizes are `round(ratio · N)` over all `N`
/// patients, capped by the multi-admission pool (test is filled first).
/// Everything else, including every single-admission patient, goes to
/// training. Each part keeps the input order.
pub fn split_dataset(ds: &EhrDataset, ratios: [f64; 3], seed: u64) -> Result<(EhrDataset, EhrDataset, EhrDataset)> {
    if ratios.iter().any(|r| !(r.is_finite() && *r >= 0.0)) || libm::fabs(ratios.iter().sum::<f64>() - 1.0) > 1e-9 {
        return Err(EhrError::RatioInvalid);
    }
    let n = ds.patients.len() as f64;
    let mut multi: Vec<usize> = (0..ds.patients.len()).filter(|&i| ds.patients[i].admissions.len() >= 2).collect();
    multi.shuffle(&mut seeded(seed));
    let n_test = (libm::round(ratios[2] * n) as usize).min(multi.len());
    let n_valid = (libm::round(ratios[1] * n) as usize).min(multi.len() - n_test);
    let mut test: Vec<usize> = multi[..n_test].to_vec();
    let mut valid: Vec<usize> = multi[n_test..n_test + n_valid].to_vec();
    let held: BTreeSet<usize> = test.iter().chain(&valid).copied().collect();
    let train: Vec<usize> = (0..ds.patients.len()).filter(|i| !held.contains(i)).collect();
    test.sort_unstable();
    valid.sort_unstable();
    Ok((ds.subset(&train), ds.subset(&valid), ds.subset(&test)))
}

/// Model input: each visit is a list of concept ids.
pub type Visits = Vec<Vec<usize>>;

#[derive(Debug, Clone, PartialEq)]
pub struct ProxySample {
    pub visits: Visits,
    /// Multi-hot targets over L1, L2, L3 (category-local order).
    pub targets: [Vec<f64>; LAB_CATEGORIES],
}

fn lab_targets(vocab: &Vocab, labs: &[usize]) -> [Vec<f64>; LAB_CATEGORIES] {
    let sizes = vocab.category_sizes();
    let mut y = sizes.map(|n| alloc::vec![0.0; n]);
    for &l in labs {
        let (cat, local) = vocab.lab_slot(l);
        y[cat as usize - 1][local] = 1.0;
    }
    y
}

/// Proxy sample of one patient. With two or more admissions the inputs are
/// all but the last admission and the targets are the last admission's
/// abnormal labs. A single admission predicts its own labs from its
/// diseases alone.
pub fn build_proxy_targets(vocab: &Vocab, patient: &Patient) -> ProxySample {
    let adm = &patient.admissions;
    let last = adm.last().expect("patients have admissions");
    let visits = if adm.len() == 1 {
        alloc::vec![last.diseases.clone()]
    } else {
        adm[..adm.len() - 1].iter().map(|a| a.concepts(vocab)).collect()
    };
    ProxySample {
        visits,
        targets: lab_targets(vocab, &last.labs),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Diagnosis,
    Hf,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Diagnosis => "diagnosis",
            Task::Hf => "hf",
        }
    }
}

impl core::str::FromStr for Task {
    type Err = String;
    fn from_str(s: &str) -> core::result::Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "diagnosis" => Ok(Task::Diagnosis),
            "hf" => Ok(Task::Hf),
            _ => Err(alloc::format!("unknown task {s}")),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DownstreamSample {
    pub visits: Visits,
    /// Multi-hot over D for diagnosis, a single 0/1 entry for HF.
    pub target: Vec<f64>,
}

/// Downstream sample: admissions `1..T−1` predict admission `T`. With
/// `realtime` the target admission's abnormal labs are appended as one more
/// visit (when there are any).
pub fn build_downstream_targets(
    vocab: &Vocab,
    patient: &Patient,
    task: Task,
    hf_markers: &BTreeSet<usize>,
    realtime: bool,
) -> Result<DownstreamSample> {
    let adm = &patient.admissions;
    if adm.len() < 2 {
        return Err(EhrError::TooFewAdmissions(patient.id.clone()));
    }
    let last = &adm[adm.len() - 1];
    let mut visits: Visits = adm[..adm.len() - 1].iter().map(|a| a.concepts(vocab)).collect();
    if realtime && !last.labs.is_empty() {
        visits.push(last.labs.iter().map(|&l| vocab.lab_concept(l)).collect());
    }
    let target = match task {
        Task::Diagnosis => {
            let mut y = alloc::vec![0.0; vocab.n_diseases()];
            for &d in &last.diseases {
                y[d] = 1.0;
            }
            y
        }
        Task::Hf => alloc::vec![if last.diseases.iter().any(|d| hf_markers.contains(d)) { 1.0 } else { 0.0 }],
    };
    Ok(DownstreamSample { visits, target })
}

/// Resolves marker codes to disease ids.
pub fn resolve_markers(vocab: &Vocab, codes: &[String]) -> Result<BTreeSet<usize>> {
    codes
        .iter()
        .map(|c| vocab.disease_id(c).ok_or_else(|| EhrError::UnknownCode { code: c.clone(), line: 0 }))
        .collect()
}

/// Non-chronic evaluation: clears target labels for diseases that already
/// appear in the sample's input visits.
pub fn drop_chronic(sample: &mut DownstreamSample) {
    for v in &sample.visits {
        for &c in v {
            if c < sample.target.len() {
                sample.target[c] = 0.0;
            }
        }
    }
}

/// Rare-code evaluation: keeps only the labels flagged in `keep`.
pub fn restrict_labels(sample: &mut DownstreamSample, keep: &[bool]) {
    for (y, &k) in sample.target.iter_mut().zip(keep) {
        if !k {
            *y = 0.0;
        }
    }
}
