use std::path::PathBuf;

use dualmar_core::ehr::EhrError;
use dualmar_core::graph::GraphError;
use dualmar_core::harvest::HarvestError;
use dualmar_core::kg::KgError;
use dualmar_core::kge::KgeError;
use dualmar_core::metrics::MetricError;
use dualmar_core::nn::NnError;
use dualmar_core::pipeline::PipelineError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("missing input {}", .0.display())]
    MissingInput(PathBuf),
    #[error("stale artifact {artifact}: recorded config hash {found}, current configuration gives {expected}")]
    StaleArtifact {
        artifact: String,
        expected: String,
        found: String,
    },
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint does not fit the configuration: {0}")]
    ConfigMismatch(String),
    #[error("the finetune path needs a pretrained checkpoint at {}", .0.display())]
    CheckpointMissing(PathBuf),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("{}:{line}: {msg}", path.display())]
    Format { path: PathBuf, line: usize, msg: String },
    #[error("{}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{}: {source}", path.display())]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },
    #[error(transparent)]
    Kg(#[from] KgError),
    #[error(transparent)]
    Harvest(#[from] HarvestError),
    #[error(transparent)]
    Kge(#[from] KgeError),
    #[error(transparent)]
    Ehr(#[from] EhrError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error(transparent)]
    Pipeline(#[from] PipelineError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    /// Stable name used in machine-readable error records.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::MissingInput(_) => "MissingInput",
            Error::StaleArtifact { .. } => "StaleArtifact",
            Error::CorruptCheckpoint(_) => "CorruptCheckpoint",
            Error::ConfigMismatch(_) => "ConfigMismatch",
            Error::CheckpointMissing(_) => "CheckpointMissing",
            Error::Config(_) => "Config",
            Error::Format { .. } => "Format",
            Error::Io { .. } => "Io",
            Error::Json { .. } => "Json",
            Error::Kg(_) => "Kg",
            Error::Harvest(_) => "Harvest",
            Error::Kge(_) => "Kge",
            Error::Ehr(_) => "Ehr",
            Error::Graph(_) => "Graph",
            Error::Nn(_) => "Nn",
            Error::Pipeline(_) => "Pipeline",
            Error::Metric(_) => "Metric",
        }
    }

    pub fn exit_code(&self) -> i32 {
        match self {
            Error::MissingInput(_) | Error::CheckpointMissing(_) => 3,
            Error::StaleArtifact { .. } => 4,
            Error::CorruptCheckpoint(_) | Error::ConfigMismatch(_) => 5,
            Error::Config(_) => 6,
            _ => 1,
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingInput(path)
        } else {
            Error::Io { path, source }
        }
    }

    pub(crate) fn json(path: impl Into<PathBuf>, source: serde_json::Error) -> Self {
        Error::Json {
            path: path.into(),
            source,
        }
    }
}
