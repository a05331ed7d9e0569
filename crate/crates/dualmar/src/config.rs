//! Pipeline configuration: one JSON document grouped by stage, unknown keys
//! rejected, with command-line flags layered on top.
//!
//! The top-level `seed` is the only seed: it is copied into every section
//! that carries one when the configuration is resolved.

use std::path::Path;

use dualmar_core::ehr::{SyntheticConfig, Task};
use dualmar_core::graph::GraphOptions;
use dualmar_core::harvest::HarvestConfig;
use dualmar_core::kg::NormalizeConfig;
use dualmar_core::kge::KgeTrainConfig;
use dualmar_core::pipeline::{ModelConfig, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsio;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KgeSection {
    pub k: usize,
    pub gamma: f64,
    pub lambda: f64,
    pub negatives: usize,
    pub lr: f64,
    pub steps: usize,
    pub batch_size: usize,
    /// Share of triples held out for link-prediction evaluation.
    pub test_frac: f64,
    pub filtered: bool,
}

impl Default for KgeSection {
    fn default() -> Self {
        let t = KgeTrainConfig::default();
        Self {
            k: t.k,
            gamma: t.gamma,
            lambda: t.lambda,
            negatives: t.negatives,
            lr: t.lr,
            steps: t.steps,
            batch_size: t.batch_size,
            test_frac: 0.1,
            filtered: true,
        }
    }
}

impl KgeSection {
    pub fn train_config(&self, seed: u64) -> KgeTrainConfig {
        KgeTrainConfig {
            k: self.k,
            gamma: self.gamma,
            lambda: self.lambda,
            negatives: self.negatives,
            lr: self.lr,
            steps: self.steps,
            batch_size: self.batch_size,
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSection {
    pub synthetic: SyntheticConfig,
    /// Train / validation / test patient shares.
    pub split: [f64; 3],
    /// Heart-failure marker codes; empty means the generator's markers.
    pub hf_codes: Vec<String>,
}

impl Default for DataSection {
    fn default() -> Self {
        let synthetic = SyntheticConfig::default();
        let n = synthetic.patients as f64;
        Self {
            split: [(n - 150.0) / n, 50.0 / n, 100.0 / n],
            synthetic,
            hf_codes: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GraphSection {
    pub disease_lab: bool,
    pub lab_lab: bool,
    pub per_patient_dedup: bool,
    /// Self-loop weight in `A = (1−φ)B + φI`.
    pub phi: f64,
}

impl Default for GraphSection {
    fn default() -> Self {
        let o = GraphOptions::default();
        Self {
            disease_lab: o.disease_lab,
            lab_lab: o.lab_lab,
            per_patient_dedup: o.per_patient_dedup,
            phi: 0.5,
        }
    }
}

impl GraphSection {
    pub fn options(&self) -> GraphOptions {
        GraphOptions {
            disease_lab: self.disease_lab,
            lab_lab: self.lab_lab,
            per_patient_dedup: self.per_patient_dedup,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitSection {
    /// Seed disease features from the exported KG embedding; off means
    /// every feature row comes from an untrained polar table.
    pub use_prior: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainSection {
    pub joint_epochs: usize,
    /// Epochs per decoder in the frozen-encoder refinement.
    pub individual_epochs: usize,
    pub train: TrainConfig,
}

impl Default for PretrainSection {
    fn default() -> Self {
        Self {
            joint_epochs: 10,
            individual_epochs: 5,
            train: TrainConfig {
                lr: 5e-3,
                ..TrainConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneSection {
    pub task: Task,
    /// Defaults to 50 for diagnosis and 20 for heart failure.
    pub epochs: Option<usize>,
    /// Append the target admission's abnormal labs as an extra input visit.
    pub realtime: bool,
    pub train: TrainConfig,
}

impl Default for FinetuneSection {
    fn default() -> Self {
        Self {
            task: Task::Diagnosis,
            epochs: None,
            realtime: false,
            train: TrainConfig {
                lr: 5e-3,
                ..TrainConfig::default()
            },
        }
    }
}

impl FinetuneSection {
    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(match self.task {
            Task::Diagnosis => 50,
            Task::Hf => 20,
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateSection {
    /// Drop labels already present in the input admissions.
    pub non_chronic: bool,
    /// Keep only labels whose training support is at most this count.
    pub rare_max_support: Option<usize>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub seed: u64,
    pub harvest: HarvestConfig,
    pub kg: NormalizeConfig,
    pub kge: KgeSection,
    pub data: DataSection,
    pub graph: GraphSection,
    pub model: ModelConfig,
    pub init: InitSection,
    pub pretrain: PretrainSection,
    pub finetune: FinetuneSection,
    pub evaluate: EvaluateSection,
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads `path`, or the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            Some(p) => Self::from_json(&fsio::read_text(p)?),
            None => Ok(Self::default()),
        }
    }

    /// Propagates the top-level seed and checks cross-section constraints.
    pub fn resolve(mut self) -> Result<Self> {
        self.data.synthetic.seed = self.seed;
        self.pretrain.train.seed = self.seed;
        self.finetune.train.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.model.feature_dim != 2 * self.kge.k {
            return bad(format!(
                "model.feature_dim ({}) must be twice kge.k ({})",
                self.model.feature_dim, self.kge.k
            ));
        }
        if !(0.0..1.0).contains(&self.kge.test_frac) {
            return bad("kge.test_frac must lie in [0, 1)".into());
        }
        if !(0.0..=1.0).contains(&self.graph.phi) {
            return bad("graph.phi must lie in [0, 1]".into());
        }
        let s: f64 = self.data.split.iter().sum();
        if self.data.split.iter().any(|&r| !(r >= 0.0)) || (s - 1.0).abs() > 1e-9 {
            return bad("data.split must be non-negative and sum to 1".into());
        }
        self.kge.train_config(self.seed).validate()?;
        self.model.validate()?;
        self.data.synthetic.validate()?;
        Ok(())
    }

    pub fn to_json(&self) -> String {
        fsio::to_json_pretty(self)
    }
}
