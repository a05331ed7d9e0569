//! Provenance records attached to every artifact.
//!
//! A stage hash is the SHA-256 of the canonical JSON of the stage name, the
//! configuration sections the stage reads, and the hashes of its upstream
//! artifacts. A consumer recomputes the hash from its own configuration and
//! refuses the artifact when they differ.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::fsio::sha256_hex;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    KgNormalize,
    KgeTrain,
    KgeExport,
    DataSynth,
    DataSplit,
    GraphBuild,
    ProxyPretrain,
    Finetune,
    DirectTrain,
    Evaluate,
}

impl Stage {
    pub const ALL: [Stage; 10] = [
        Stage::KgNormalize,
        Stage::KgeTrain,
        Stage::KgeExport,
        Stage::DataSynth,
        Stage::DataSplit,
        Stage::GraphBuild,
        Stage::ProxyPretrain,
        Stage::Finetune,
        Stage::DirectTrain,
        Stage::Evaluate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stage::KgNormalize => "kg-normalize",
            Stage::KgeTrain => "kge-train",
            Stage::KgeExport => "kge-export",
            Stage::DataSynth => "data-synth",
            Stage::DataSplit => "data-split",
            Stage::GraphBuild => "graph-build",
            Stage::ProxyPretrain => "proxy-pretrain",
            Stage::Finetune => "finetune",
            Stage::DirectTrain => "direct-train",
            Stage::Evaluate => "evaluate",
        }
    }

    pub fn from_name(s: &str) -> Option<Stage> {
        Stage::ALL.into_iter().find(|st| st.name() == s)
    }

    /// Configuration the stage depends on.
    pub fn sections(self, cfg: &PipelineConfig) -> Value {
        let mut kge = serde_json::to_value(&cfg.kge).expect("plain data");
        if let Some(m) = kge.as_object_mut() {
            m.remove("filtered");
        }
        match self {
            Stage::KgNormalize => json!({ "kg": cfg.kg }),
            Stage::KgeTrain => json!({ "seed": cfg.seed, "kge": kge }),
            Stage::KgeExport => json!({}),
            Stage::DataSynth => json!({ "seed": cfg.seed, "synthetic": cfg.data.synthetic, "hf_codes": cfg.data.hf_codes }),
            Stage::DataSplit => json!({ "seed": cfg.seed, "split": cfg.data.split }),
            Stage::GraphBuild => json!({ "graph": cfg.graph }),
            Stage::ProxyPretrain => json!({
                "seed": cfg.seed,
                "model": cfg.model,
                "init": cfg.init,
                "pretrain": cfg.pretrain,
            }),
            Stage::Finetune => json!({
                "seed": cfg.seed,
                "finetune": cfg.finetune,
                "epochs": cfg.finetune.epochs(),
            }),
            Stage::DirectTrain => json!({
                "seed": cfg.seed,
                "model": cfg.model,
                "init": cfg.init,
                "finetune": cfg.finetune,
                "epochs": cfg.finetune.epochs(),
            }),
            Stage::Evaluate => json!({ "evaluate": cfg.evaluate }),
        }
    }

    pub fn hash(self, cfg: &PipelineConfig, upstream: &BTreeMap<String, String>) -> String {
        let doc = json!({
            "stage": self.name(),
            "config": self.sections(cfg),
            "upstream": upstream,
        });
        sha256_hex(&serde_json::to_vec(&doc).expect("plain data"))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactMeta {
    pub stage: String,
    pub config_hash: String,
    /// Hashes of the artifacts (or raw input files) this one was built from.
    pub upstream: BTreeMap<String, String>,
}

impl ArtifactMeta {
    pub fn new(stage: Stage, cfg: &PipelineConfig, upstream: BTreeMap<String, String>) -> Self {
        Self {
            stage: stage.name().into(),
            config_hash: stage.hash(cfg, &upstream),
            upstream,
        }
    }

    /// Fails with `StaleArtifact` unless the recorded hash is what `cfg`
    /// gives for the same stage and upstream.
    pub fn check(&self, artifact: &str, cfg: &PipelineConfig) -> Result<()> {
        let stage = Stage::from_name(&self.stage)
            .ok_or_else(|| Error::Config(format!("{artifact}: unknown producing stage {:?}", self.stage)))?;
        let expected = stage.hash(cfg, &self.upstream);
        if expected != self.config_hash {
            return Err(Error::StaleArtifact {
                artifact: artifact.into(),
                expected,
                found: self.config_hash.clone(),
            });
        }
        Ok(())
    }

    /// Fails with `StaleArtifact` when this artifact was built from a
    /// different version of `name` than `current`.
    pub fn check_link(&self, artifact: &str, name: &str, current: &ArtifactMeta) -> Result<()> {
        match self.upstream.get(name) {
            Some(h) if *h == current.config_hash => Ok(()),
            Some(h) => Err(Error::StaleArtifact {
                artifact: format!("{artifact} (built from {name})"),
                expected: current.config_hash.clone(),
                found: h.clone(),
            }),
            None => Err(Error::StaleArtifact {
                artifact: format!("{artifact} (built from {name})"),
                expected: current.config_hash.clone(),
                found: "none".into(),
            }),
        }
    }

    pub fn to_value(&self) -> Value {
        serde_json::to_value(self).expect("plain data")
    }

    pub fn from_echo(echo: &Value, artifact: &str) -> Result<Self> {
        let v = echo
            .get("meta")
            .ok_or_else(|| Error::CorruptCheckpoint(format!("{artifact} carries no provenance record")))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::CorruptCheckpoint(format!("{artifact}: {e}")))
    }
}
