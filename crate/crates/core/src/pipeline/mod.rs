//! Encoder, proxy-task decoders, task heads and their training loops.
//!
//! Parameter names: `encoder/embedding`, `encoder/gnn{l}/…`,
//! `encoder/code_att/…`, `encoder/proj/weight`, `encoder/visit_att/…`,
//! `decoder/{1,2,3}/{w,b}{1,2,3}` and `head/{weight,bias}`.

mod decoder;
mod encoder;
#[cfg(test)]
mod tests;
mod train;

pub use decoder::{decoder_forward, head_forward, DecoderCache, HeadCache};
pub use encoder::{encode, encoder_backward, encoder_forward, EncoderCache, GraphInput};
pub use train::{
    evaluate, finetune, lab_embeddings, predict, proxy_individual_train, proxy_joint_train, proxy_logits,
    proxy_batch_gradients, proxy_loss, proxy_target_matrices, refine_decoder, task_batch_gradients, IndividualReport,
    Path,
};

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;
use rand::Rng;

use crate::ehr::{Task, Vocab};
use crate::kge::{export_all, PolarTable};
use crate::metrics::MetricError;
use crate::nn::{AdamConfig, Matrix, NnError, ParamStore};
use crate::rng::{derive_seed, seeded};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PipelineError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Metric(#[from] MetricError),
    #[error("concept {0} has no feature row")]
    MissingFeatureRow(usize),
    #[error("prior row for {code} has width {got}, expected {expected}")]
    PriorWidth { code: String, got: usize, expected: usize },
    #[error("no training samples")]
    EmptyTrainingSet,
    #[error("sample has no visits")]
    EmptySample,
    #[error("model has no task head")]
    HeadMissing,
    #[error("head was built for a different task or path")]
    HeadMismatch,
    #[error("invalid model config: {0}")]
    ConfigInvalid(&'static str),
}

pub type Result<T> = core::result::Result<T, PipelineError>;

/// Graph layer used by the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GnnKind {
    /// Attention over the nonzero pattern of `A`, connectivity only.
    Attention,
    /// Attention with an additive `ln(1 + A_ij)` edge bias.
    AttentionWeighted,
    /// `relu(Â H W)`.
    Propagation,
}

/// Structural and regularization settings of the network.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Node feature width (twice the KG embedding size).
    pub feature_dim: usize,
    pub gnn: GnnKind,
    pub gnn_layers: usize,
    pub gnn_hidden: usize,
    /// Code-level attention width `a`.
    pub code_att_dim: usize,
    /// Admission-level attention width `b`.
    pub visit_att_dim: usize,
    /// Patient embedding width `p`.
    pub patient_dim: usize,
    pub attention_dropout: f64,
    pub decoder_hidden: [usize; 2],
    pub decoder_dropout: f64,
    pub head_dropout: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            feature_dim: 128,
            gnn: GnnKind::Attention,
            gnn_layers: 2,
            gnn_hidden: 256,
            code_att_dim: 256,
            visit_att_dim: 256,
            patient_dim: 256,
            attention_dropout: 0.2,
            decoder_hidden: [256, 128],
            decoder_dropout: 0.4,
            head_dropout: 0.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.feature_dim,
            self.gnn_layers,
            self.gnn_hidden,
            self.code_att_dim,
            self.visit_att_dim,
            self.patient_dim,
            self.decoder_hidden[0],
            self.decoder_hidden[1],
        ];
        if dims.contains(&0) {
            return Err(PipelineError::ConfigInvalid("all widths must be positive"));
        }
        for r in [self.attention_dropout, self.decoder_dropout, self.head_dropout] {
            if !(0.0..1.0).contains(&r) {
                return Err(PipelineError::ConfigInvalid("dropout rates must lie in [0, 1)"));
            }
        }
        Ok(())
    }

    /// Width of the lab embedding produced by each decoder.
    pub fn lab_dim(&self) -> usize {
        self.decoder_hidden[1]
    }
}

/// Optimizer and schedule settings.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub adam: AdamConfig,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            adam: AdamConfig::default(),
            seed: 0,
        }
    }
}

/// Shape of an attached task head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct HeadSpec {
    pub task: Task,
    pub path: Path,
    pub outputs: usize,
}

/// Network parameters together with the dimensions they were built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: ModelConfig,
    pub n_concepts: usize,
    pub lab_sizes: [usize; 3],
    pub head: Option<HeadSpec>,
    pub store: ParamStore,
}

fn glorot<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> Matrix {
    let bound = libm::sqrt(6.0 / (rows + cols) as f64);
    Matrix::from_fn(rows, cols, |_, _| rng.random_range(-bound..=bound))
}

pub fn gnn_prefix(layer: usize) -> String {
    alloc::format!("encoder/gnn{layer}")
}

pub fn decoder_prefix(i: usize) -> String {
    alloc::format!("decoder/{}", i + 1)
}

impl Model {
    /// Fresh parameters. `features` become the trainable node embedding and
    /// must have one row per concept and `cfg.feature_dim` columns.
    pub fn new(cfg: ModelConfig, features: Matrix, lab_sizes: [usize; 3], seed: u64) -> Result<Self> {
        cfg.validate()?;
        if features.cols() != cfg.feature_dim {
            return Err(PipelineError::ConfigInvalid("feature width differs from feature_dim"));
        }
        let mut rng = seeded(derive_seed(seed, 100));
        let mut s = ParamStore::new();
        let n_concepts = features.rows();
        s.insert("encoder/embedding", features)?;
        let mut width = cfg.feature_dim;
        for l in 0..cfg.gnn_layers {
            let p = gnn_prefix(l);
            s.insert(&alloc::format!("{p}/weight"), glorot(&mut rng, width, cfg.gnn_hidden))?;
            if cfg.gnn != GnnKind::Propagation {
                s.insert(&alloc::format!("{p}/att_src"), glorot(&mut rng, cfg.gnn_hidden, 1))?;
                s.insert(&alloc::format!("{p}/att_dst"), glorot(&mut rng, cfg.gnn_hidden, 1))?;
            }
            width = cfg.gnn_hidden;
        }
        s.insert("encoder/code_att/weight", glorot(&mut rng, width, cfg.code_att_dim))?;
        s.insert("encoder/code_att/context", glorot(&mut rng, cfg.code_att_dim, 1))?;
        s.insert("encoder/proj/weight", glorot(&mut rng, width, cfg.patient_dim))?;
        s.insert("encoder/visit_att/weight", glorot(&mut rng, cfg.patient_dim, cfg.visit_att_dim))?;
        s.insert("encoder/visit_att/context", glorot(&mut rng, cfg.visit_att_dim, 1))?;
        let [h1, h2] = cfg.decoder_hidden;
        for (i, &out) in lab_sizes.iter().enumerate() {
            let p = decoder_prefix(i);
            for (j, (fan_in, fan_out)) in [(cfg.patient_dim, h1), (h1, h2), (h2, out)].into_iter().enumerate() {
                s.insert(&alloc::format!("{p}/w{}", j + 1), glorot(&mut rng, fan_in, fan_out))?;
                s.insert(&alloc::format!("{p}/b{}", j + 1), Matrix::zeros(1, fan_out))?;
            }
        }
        Ok(Self {
            cfg,
            n_concepts,
            lab_sizes,
            head: None,
            store: s,
        })
    }

    /// Input width of a head on the given path.
    pub fn head_input(&self, path: Path) -> usize {
        match path {
            Path::Direct => self.cfg.patient_dim,
            Path::Finetune => 3 * self.cfg.lab_dim() + self.cfg.patient_dim,
        }
    }

    /// Adds a task head (Glorot weight, zero bias), replacing nothing: a
    /// model carries at most one head.
    pub fn attach_head(&mut self, spec: HeadSpec, seed: u64) -> Result<()> {
        if self.head.is_some() {
            return Err(PipelineError::HeadMismatch);
        }
        let mut rng = seeded(derive_seed(seed, 200));
        let w = glorot(&mut rng, self.head_input(spec.path), spec.outputs);
        self.store.insert("head/weight", w)?;
        self.store.insert("head/bias", Matrix::zeros(1, spec.outputs))?;
        self.head = Some(spec);
        Ok(())
    }
}

/// Initial node features: rows with a prior (keyed by concept code) copy
/// it; every other row is the export of an untrained polar table with the
/// same `k` and margin `gamma`, drawn from `seed`. Returns the matrix and
/// the number of rows taken from the prior.
pub fn initial_features(
    vocab: &Vocab,
    k: usize,
    gamma: f64,
    prior: &BTreeMap<String, Vec<f64>>,
    seed: u64,
) -> Result<(Matrix, usize)> {
    let n = vocab.n_concepts();
    let table = PolarTable::init(n, 0, k, gamma, &mut seeded(derive_seed(seed, 300)));
    let mut x = export_all(&table);
    let mut matched = 0;
    for c in 0..n {
        let code = vocab.concept_code(c);
        if let Some(row) = prior.get(code) {
            if row.len() != 2 * k {
                return Err(PipelineError::PriorWidth {
                    code: code.into(),
                    got: row.len(),
                    expected: 2 * k,
                });
            }
            x.row_mut(c).copy_from_slice(row);
            matched += 1;
        }
    }
    Ok((x, matched))
}
