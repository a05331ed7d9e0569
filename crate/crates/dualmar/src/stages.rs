//! The pipeline stages as functions over an output directory. Each stage
//! validates the provenance of what it reads, writes its artifacts with a
//! provenance record, and returns a small JSON summary.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use dualmar_core::ehr::{
    build_downstream_targets, build_proxy_targets, drop_chronic, generate_synthetic, resolve_markers,
    restrict_labels, split_dataset, synthetic_hierarchy, DownstreamSample, EhrDataset, ProxySample, Task, Vocab,
};
use dualmar_core::graph::{assemble_adjacency, build_cooccurrence};
use dualmar_core::harvest::{harvest, render_prompt, PromptSpec};
use dualmar_core::kg::{kg_stats, normalize_kg, CrossRefTable, KnowledgeGraph, RawGraph, Source};
use dualmar_core::kge::{
    evaluate_link_prediction, export_entity_embeddings, random_guess_mrr, split_triples, train_kge,
};
use dualmar_core::nn::gradcheck::CheckReport;
use dualmar_core::nn::Matrix;
use dualmar_core::pipeline::{
    evaluate as evaluate_model, finetune as finetune_model, initial_features, proxy_individual_train,
    proxy_joint_train, GraphInput, HeadSpec, Model, Path as HeadPath,
};
use dualmar_core::suite::gradient_suite;
use log::info;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::artifact::{ArtifactMeta, Stage};
use crate::checkpoint::{model_checkpoint, read_config, restore_model, Checkpoint};
use crate::config::PipelineConfig;
use crate::error::{Error, Result};
use crate::formats::{
    polar_export, polar_import, prompt_hash, read_coo, read_ehr_jsonl, read_kg_archive, read_triple_tsv, read_vocab,
    read_xref, write_coo, write_ehr_jsonl, write_kg_archive, write_triple_tsv, write_vocab, MatrixHeader,
    MetricReport, Transcript,
};
use crate::fsio;

pub const SPLITS: [&str; 3] = ["train", "valid", "test"];

/// Relative error above which a gradient check counts as failed.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

/// File locations under the output directory.
#[derive(Debug, Clone)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn ehr(&self) -> PathBuf {
        self.root.join("data/ehr.jsonl")
    }

    pub fn vocab(&self) -> PathBuf {
        self.root.join("data/vocab.json")
    }

    pub fn data_meta(&self) -> PathBuf {
        self.root.join("data/meta.json")
    }

    /// Synthetic disease hierarchy written next to generated data.
    pub fn hierarchy(&self) -> PathBuf {
        self.root.join("data/hierarchy")
    }

    pub fn split(&self, name: &str) -> PathBuf {
        self.root.join(format!("split/{name}.jsonl"))
    }

    pub fn split_meta(&self) -> PathBuf {
        self.root.join("split/meta.json")
    }

    pub fn coo(&self) -> PathBuf {
        self.root.join("graph/cooccurrence.coo")
    }

    pub fn graph_header(&self) -> PathBuf {
        self.root.join("graph/header.json")
    }

    pub fn kg(&self) -> PathBuf {
        self.root.join("kg")
    }

    pub fn harvested(&self) -> PathBuf {
        self.root.join("harvest/generated.tsv")
    }

    pub fn kge_table(&self) -> PathBuf {
        self.root.join("kge/table.ckpt")
    }

    pub fn kge_eval(&self) -> PathBuf {
        self.root.join("kge/eval.json")
    }

    pub fn prior(&self) -> PathBuf {
        self.root.join("kge/prior.ckpt")
    }

    pub fn pretrain(&self) -> PathBuf {
        self.root.join("pretrain/model.ckpt")
    }

    pub fn model(&self, path: HeadPath, task: Task) -> PathBuf {
        self.root.join(format!("models/{}-{}.ckpt", path_name(path), task.as_str()))
    }

    pub fn report(&self, task: Task, variant: &str, split: &str) -> PathBuf {
        self.root.join(format!("reports/{}-{variant}-{split}.json", task.as_str()))
    }
}

fn path_name(p: HeadPath) -> &'static str {
    match p {
        HeadPath::Direct => "direct",
        HeadPath::Finetune => "finetune",
    }
}

/// Worker cap from `DUALMAR_THREADS`. Every stage currently runs on one
/// thread; the value is validated and logged.
pub fn worker_threads() -> Result<usize> {
    match std::env::var("DUALMAR_THREADS") {
        Err(_) => Ok(1),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(n),
            _ => Err(Error::Config(format!("DUALMAR_THREADS must be a positive integer, got {v:?}"))),
        },
    }
}

fn obj(v: Value) -> Map<String, Value> {
    match v {
        Value::Object(m) => m,
        _ => Map::new(),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KgMeta {
    pub meta: ArtifactMeta,
    pub nodes: usize,
    pub edge_types: usize,
    pub triples: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataMeta {
    pub meta: ArtifactMeta,
    pub hf_codes: Vec<String>,
    pub patients: usize,
    pub admissions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitMeta {
    pub meta: ArtifactMeta,
    pub patients: BTreeMap<String, usize>,
}

pub const KG_META_FILE: &str = "meta.json";

fn write_kg_with_meta(dir: &Path, g: &KnowledgeGraph, meta: ArtifactMeta) -> Result<Value> {
    write_kg_archive(dir, g)?;
    let s = kg_stats(g);
    let km = KgMeta {
        meta,
        nodes: s.nodes,
        edge_types: s.edge_types,
        triples: s.triples,
    };
    fsio::write_json(&dir.join(KG_META_FILE), &km)?;
    Ok(serde_json::to_value(&km).expect("plain data"))
}

/// Reads an archive and its provenance, checking the latter against `cfg`.
pub fn load_kg(cfg: &PipelineConfig, dir: &Path) -> Result<(KnowledgeGraph, ArtifactMeta)> {
    let km: KgMeta = fsio::read_json(&dir.join(KG_META_FILE))?;
    km.meta.check("knowledge graph", cfg)?;
    Ok((read_kg_archive(dir)?, km.meta))
}

// ---------------------------------------------------------------- kg

/// Merges ontology and generated triple files into a normalized archive.
pub fn kg_normalize(
    cfg: &PipelineConfig,
    ontology: &[PathBuf],
    generated: &[PathBuf],
    xref: Option<&Path>,
    out: &Path,
) -> Result<Value> {
    if ontology.is_empty() && generated.is_empty() {
        return Err(Error::Config("kg-normalize needs at least one triple file".into()));
    }
    let mut raw = RawGraph::default();
    let mut upstream = BTreeMap::new();
    for (source, files) in [(Source::Ontology, ontology), (Source::Generated, generated)] {
        for (i, f) in files.iter().enumerate() {
            let bytes = fsio::read_bytes(f)?;
            upstream.insert(format!("input:{}:{i}", source.as_str()), fsio::sha256_hex(&bytes));
            raw.extend_from_triples(&read_triple_tsv(f)?, source);
        }
    }
    let table = match xref {
        Some(p) => {
            upstream.insert("input:xref".into(), fsio::sha256_hex(&fsio::read_bytes(p)?));
            read_xref(p)?
        }
        None => CrossRefTable::new(),
    };
    info!("normalizing {} raw triples over {} entities", raw.triples.len(), raw.entities.len());
    let g = normalize_kg(&raw, &table, &cfg.kg)?;
    let meta = ArtifactMeta::new(Stage::KgNormalize, cfg, upstream);
    write_kg_with_meta(out, &g, meta)
}

/// Counts of an archive, split by triple source.
pub fn kg_stats_summary(dir: &Path) -> Result<Value> {
    let g = read_kg_archive(dir)?;
    let s = kg_stats(&g);
    let mut by_source = BTreeMap::new();
    for t in g.triples() {
        *by_source.entry(t.source.as_str()).or_insert(0usize) += 1;
    }
    let coded = g.entities().iter().filter(|e| e.code.is_some()).count();
    Ok(json!({
        "nodes": s.nodes,
        "edge_types": s.edge_types,
        "triples": s.triples,
        "coded_entities": coded,
        "by_source": by_source,
    }))
}

// ---------------------------------------------------------------- harvest

pub fn read_specs(path: &Path) -> Result<Vec<PromptSpec>> {
    fsio::read_jsonl(path)
}

/// Every oracle call the harvest would make, as JSON Lines records
/// `{spec, pass, prompt_hash, prompt}`.
pub fn harvest_render(cfg: &PipelineConfig, specs: &[PromptSpec]) -> Result<String> {
    let calls = cfg.harvest.x * (cfg.harvest.y + 1);
    let mut out = String::new();
    for (i, spec) in specs.iter().enumerate() {
        let prompt = render_prompt(spec)?;
        let hash = prompt_hash(&prompt);
        for pass in 0..calls {
            let rec = json!({"spec": i, "pass": pass, "prompt_hash": hash, "prompt": prompt});
            out.push_str(&rec.to_string());
            out.push('\n');
        }
    }
    Ok(out)
}

/// Replays `transcript` through the parser and writes accepted triples as
/// triple TSV.
pub fn harvest_parse(cfg: &PipelineConfig, specs: &[PromptSpec], transcript: &Transcript, out: &Path) -> Result<Value> {
    let mut oracle = transcript;
    let outcome = harvest(specs, &mut oracle, &cfg.harvest)?;
    write_triple_tsv(out, &outcome.triples)?;
    let rejected: usize = outcome.reports.iter().map(|(_, _, r)| r.rejected.len()).sum();
    let accepted: usize = outcome.reports.iter().map(|(_, _, r)| r.accepted.len()).sum();
    let failures: Vec<Value> = outcome
        .failures
        .iter()
        .map(|f| json!({"spec": f.spec, "pass": f.pass, "message": f.message}))
        .collect();
    for f in &outcome.failures {
        log::warn!("spec {} pass {}: {}", f.spec, f.pass, f.message);
    }
    Ok(json!({
        "triples": outcome.triples.len(),
        "accepted_lines": accepted,
        "rejected_lines": rejected,
        "failures": failures,
    }))
}

// ---------------------------------------------------------------- kge

pub fn kge_train(cfg: &PipelineConfig, kg_dir: &Path, layout: &Layout) -> Result<Value> {
    let (g, kg_meta) = load_kg(cfg, kg_dir)?;
    let all = g.id_triples();
    let (train, test) = split_triples(&all, cfg.kge.test_frac, cfg.seed);
    let kcfg = cfg.kge.train_config(cfg.seed);
    let every = (kcfg.steps / 10).max(1);
    let mut last = f64::NAN;
    info!("training polar embedding on {} triples ({} held out)", train.len(), test.len());
    let table = train_kge(g.entities().len(), g.relations().len(), &train, &kcfg, &mut |step, loss| {
        last = loss;
        if (step + 1) % every == 0 {
            info!("kge step {} loss {loss}", step + 1);
        }
    })?;
    let upstream = BTreeMap::from([("kg".to_string(), kg_meta.config_hash)]);
    let meta = ArtifactMeta::new(Stage::KgeTrain, cfg, upstream);
    let mut extra = Map::new();
    extra.insert("meta".into(), meta.to_value());
    extra.insert("final_loss".into(), json!(last));
    polar_export(&table, &g, extra)?.save(&layout.kge_table())?;
    Ok(json!({"entities": g.entities().len(), "train_triples": train.len(), "test_triples": test.len(), "final_loss": last, "config_hash": meta.config_hash}))
}

fn load_table(cfg: &PipelineConfig, layout: &Layout) -> Result<(Checkpoint, ArtifactMeta)> {
    let ck = Checkpoint::load(&layout.kge_table())?;
    let meta = ArtifactMeta::from_echo(&ck.config, "embedding table")?;
    meta.check("embedding table", cfg)?;
    Ok((ck, meta))
}

pub fn kge_eval(cfg: &PipelineConfig, kg_dir: &Path, layout: &Layout) -> Result<Value> {
    let (g, kg_meta) = load_kg(cfg, kg_dir)?;
    let (ck, meta) = load_table(cfg, layout)?;
    meta.check_link("embedding table", "kg", &kg_meta)?;
    let (table, _) = polar_import(&ck)?;
    let all = g.id_triples();
    let (_, test) = split_triples(&all, cfg.kge.test_frac, cfg.seed);
    let report = evaluate_link_prediction(&table, &all, &test, cfg.kge.lambda, cfg.kge.filtered)?;
    let random = random_guess_mrr(table.n_entities(), &all, &test, cfg.kge.filtered);
    let out = json!({
        "report": report,
        "random_guess_mrr": random,
        "config_hash": meta.config_hash,
    });
    fsio::write_json(&layout.kge_eval(), &out)?;
    Ok(out)
}

/// Feature rows keyed by entity code, for seeding the encoder.
pub fn kge_export(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let (ck, table_meta) = load_table(cfg, layout)?;
    let (table, entities) = polar_import(&ck)?;
    let mut seen = BTreeSet::new();
    let (mut ids, mut codes) = (Vec::new(), Vec::new());
    for e in &entities {
        if let Some(c) = &e.code {
            if seen.insert(c.clone()) {
                ids.push(e.id);
                codes.push(c.clone());
            }
        }
    }
    let features = export_entity_embeddings(&table, &ids)?;
    let meta = ArtifactMeta::new(
        Stage::KgeExport,
        cfg,
        BTreeMap::from([("kge".to_string(), table_meta.config_hash)]),
    );
    let mut out = Checkpoint::new(json!({"meta": meta, "codes": codes, "k": table.k()}));
    out.push("features", features);
    out.save(&layout.prior())?;
    Ok(json!({"coded_entities": codes.len(), "k": table.k(), "config_hash": meta.config_hash}))
}

/// The exported prior as a code → row map, with its provenance.
pub fn load_prior(cfg: &PipelineConfig, layout: &Layout) -> Result<(BTreeMap<String, Vec<f64>>, ArtifactMeta)> {
    let ck = Checkpoint::load(&layout.prior())?;
    let meta = ArtifactMeta::from_echo(&ck.config, "feature prior")?;
    meta.check("feature prior", cfg)?;
    if layout.kge_table().exists() {
        let table_meta = ArtifactMeta::from_echo(&read_config(&layout.kge_table())?, "embedding table")?;
        meta.check_link("feature prior", "kge", &table_meta)?;
    }
    let codes: Vec<String> = ck
        .config
        .get("codes")
        .cloned()
        .map(serde_json::from_value)
        .transpose()
        .map_err(|e| Error::CorruptCheckpoint(format!("prior codes: {e}")))?
        .unwrap_or_default();
    let f = ck.require("features")?;
    if f.rows() != codes.len() {
        return Err(Error::CorruptCheckpoint("prior rows and codes disagree".into()));
    }
    let map = codes.into_iter().enumerate().map(|(i, c)| (c, f.row(i).to_vec())).collect();
    Ok((map, meta))
}

// ---------------------------------------------------------------- data

pub fn data_synth(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let data = generate_synthetic(&cfg.data.synthetic)?;
    let hf_codes = if cfg.data.hf_codes.is_empty() {
        data.hf_codes.clone()
    } else {
        resolve_markers(&data.dataset.vocab, &cfg.data.hf_codes)?;
        cfg.data.hf_codes.clone()
    };
    let meta = ArtifactMeta::new(Stage::DataSynth, cfg, BTreeMap::new());
    write_ehr_jsonl(&layout.ehr(), &data.dataset)?;
    write_vocab(&layout.vocab(), &data.dataset.vocab)?;
    let hierarchy = synthetic_hierarchy(&data.dataset.vocab, &data.truth);
    write_kg_with_meta(&layout.hierarchy(), &hierarchy, meta.clone())?;
    let dm = DataMeta {
        meta,
        hf_codes,
        patients: data.dataset.patients.len(),
        admissions: data.dataset.admission_count(),
    };
    fsio::write_json(&layout.data_meta(), &dm)?;
    info!("generated {} patients with {} admissions", dm.patients, dm.admissions);
    Ok(serde_json::to_value(&dm).expect("plain data"))
}

fn load_data_meta(cfg: &PipelineConfig, layout: &Layout) -> Result<DataMeta> {
    let dm: DataMeta = fsio::read_json(&layout.data_meta())?;
    dm.meta.check("dataset", cfg)?;
    Ok(dm)
}

pub fn data_split(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let dm = load_data_meta(cfg, layout)?;
    let ds = read_ehr_jsonl(&layout.ehr(), read_vocab(&layout.vocab())?)?;
    let (train, valid, test) = split_dataset(&ds, cfg.data.split, cfg.seed)?;
    let mut patients = BTreeMap::new();
    for (name, part) in SPLITS.iter().zip([&train, &valid, &test]) {
        write_ehr_jsonl(&layout.split(name), part)?;
        patients.insert(name.to_string(), part.patients.len());
    }
    let meta = ArtifactMeta::new(Stage::DataSplit, cfg, BTreeMap::from([("data".to_string(), dm.meta.config_hash)]));
    let sm = SplitMeta { meta, patients };
    fsio::write_json(&layout.split_meta(), &sm)?;
    Ok(serde_json::to_value(&sm).expect("plain data"))
}

fn load_split_meta(cfg: &PipelineConfig, layout: &Layout) -> Result<SplitMeta> {
    let sm: SplitMeta = fsio::read_json(&layout.split_meta())?;
    sm.meta.check("split", cfg)?;
    if layout.data_meta().exists() {
        let dm: DataMeta = fsio::read_json(&layout.data_meta())?;
        sm.meta.check_link("split", "data", &dm.meta)?;
    }
    Ok(sm)
}

pub fn load_split(cfg: &PipelineConfig, layout: &Layout, name: &str) -> Result<(EhrDataset, ArtifactMeta)> {
    if !SPLITS.contains(&name) {
        return Err(Error::Config(format!("unknown split {name:?}")));
    }
    let sm = load_split_meta(cfg, layout)?;
    let ds = read_ehr_jsonl(&layout.split(name), read_vocab(&layout.vocab())?)?;
    Ok((ds, sm.meta))
}

// ---------------------------------------------------------------- graph

pub fn graph_build(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let (train, split_meta) = load_split(cfg, layout, "train")?;
    let b = build_cooccurrence(&train, cfg.graph.options())?;
    assemble_adjacency(&b, cfg.graph.phi)?;
    let meta = ArtifactMeta::new(Stage::GraphBuild, cfg, BTreeMap::from([("split".to_string(), split_meta.config_hash)]));
    let nodes = (0..train.vocab.n_concepts()).map(|c| train.vocab.concept_code(c).to_string()).collect();
    let header = MatrixHeader {
        n: b.n(),
        phi: cfg.graph.phi,
        nnz: b.nnz(),
        nodes,
        options: cfg.graph.options(),
        meta,
    };
    write_coo(&layout.coo(), &b)?;
    fsio::write_json(&layout.graph_header(), &header)?;
    Ok(json!({"n": header.n, "nnz": header.nnz, "phi": header.phi, "config_hash": header.meta.config_hash}))
}

pub fn load_graph(cfg: &PipelineConfig, layout: &Layout, vocab: &Vocab) -> Result<(GraphInput, ArtifactMeta)> {
    let header: MatrixHeader = fsio::read_json(&layout.graph_header())?;
    header.meta.check("graph", cfg)?;
    if layout.split_meta().exists() {
        let sm: SplitMeta = fsio::read_json(&layout.split_meta())?;
        header.meta.check_link("graph", "split", &sm.meta)?;
    }
    if header.n != vocab.n_concepts() {
        return Err(Error::ConfigMismatch(format!(
            "graph has {} nodes, vocabulary {} concepts",
            header.n,
            vocab.n_concepts()
        )));
    }
    let b = read_coo(&layout.coo(), header.n)?;
    let adj = assemble_adjacency(&b, header.phi)?;
    Ok((GraphInput::new(&adj, cfg.model.gnn), header.meta))
}

// ---------------------------------------------------------------- model stages

/// Initial node features and the provenance of the prior, when used.
fn features(cfg: &PipelineConfig, layout: &Layout, vocab: &Vocab) -> Result<(Matrix, Option<ArtifactMeta>)> {
    let (prior, meta) = if cfg.init.use_prior {
        let (p, m) = load_prior(cfg, layout)?;
        (p, Some(m))
    } else {
        (BTreeMap::new(), None)
    };
    let (x, matched) = initial_features(vocab, cfg.kge.k, cfg.kge.gamma, &prior, cfg.seed)?;
    info!("{matched} of {} feature rows taken from the prior", vocab.n_concepts());
    Ok((x, meta))
}

fn fresh_model(cfg: &PipelineConfig, layout: &Layout, vocab: &Vocab, graph_meta: &ArtifactMeta) -> Result<(Model, BTreeMap<String, String>)> {
    let (x, prior_meta) = features(cfg, layout, vocab)?;
    let model = Model::new(cfg.model.clone(), x, vocab.category_sizes(), cfg.seed)?;
    let mut upstream = BTreeMap::from([("graph".to_string(), graph_meta.config_hash.clone())]);
    if let Some(m) = prior_meta {
        upstream.insert("prior".into(), m.config_hash);
    }
    Ok((model, upstream))
}

pub fn proxy_samples(ds: &EhrDataset) -> Vec<ProxySample> {
    ds.patients.iter().map(|p| build_proxy_targets(&ds.vocab, p)).collect()
}

/// Task samples of every patient with at least two admissions.
pub fn downstream_samples(
    ds: &EhrDataset,
    task: Task,
    markers: &BTreeSet<usize>,
    realtime: bool,
) -> Result<Vec<DownstreamSample>> {
    ds.patients
        .iter()
        .filter(|p| p.admissions.len() >= 2)
        .map(|p| build_downstream_targets(&ds.vocab, p, task, markers, realtime).map_err(Error::from))
        .collect()
}

fn hf_markers(layout: &Layout, vocab: &Vocab) -> Result<BTreeSet<usize>> {
    let dm: DataMeta = fsio::read_json(&layout.data_meta())?;
    Ok(resolve_markers(vocab, &dm.hf_codes)?)
}

fn task_samples(cfg: &PipelineConfig, layout: &Layout, ds: &EhrDataset) -> Result<Vec<DownstreamSample>> {
    let task = cfg.finetune.task;
    let markers = match task {
        Task::Hf => hf_markers(layout, &ds.vocab)?,
        Task::Diagnosis => BTreeSet::new(),
    };
    downstream_samples(ds, task, &markers, cfg.finetune.realtime)
}

pub fn proxy_pretrain(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let (train, _) = load_split(cfg, layout, "train")?;
    let (graph, graph_meta) = load_graph(cfg, layout, &train.vocab)?;
    let (mut model, upstream) = fresh_model(cfg, layout, &train.vocab, &graph_meta)?;
    let samples = proxy_samples(&train);
    let tc = &cfg.pretrain.train;
    let joint = proxy_joint_train(&mut model, &graph, &samples, tc, cfg.pretrain.joint_epochs, &mut |e, l| {
        info!("joint epoch {} loss {l}", e + 1)
    })?;
    let ind = proxy_individual_train(&mut model, &graph, &samples, tc, cfg.pretrain.individual_epochs, &mut |c, e, l| {
        info!("decoder {} epoch {} loss {l}", c + 1, e + 1)
    })?;
    let meta = ArtifactMeta::new(Stage::ProxyPretrain, cfg, upstream);
    let extra = obj(json!({
        "meta": meta,
        "joint_losses": joint,
        "individual": {"before": ind.before, "after": ind.after},
    }));
    model_checkpoint(&model, extra)?.save(&layout.pretrain())?;
    Ok(json!({"joint_losses": joint, "individual_before": ind.before, "individual_after": ind.after, "config_hash": meta.config_hash}))
}

fn train_head(
    cfg: &PipelineConfig,
    layout: &Layout,
    mut model: Model,
    graph: &GraphInput,
    train: &EhrDataset,
    path: HeadPath,
    stage: Stage,
    upstream: BTreeMap<String, String>,
) -> Result<Value> {
    let samples = task_samples(cfg, layout, train)?;
    let task = cfg.finetune.task;
    let losses = finetune_model(&mut model, graph, &samples, task, path, &cfg.finetune.train, cfg.finetune.epochs(), &mut |e, l| {
        info!("{} epoch {} loss {l}", path_name(path), e + 1)
    })?;
    let meta = ArtifactMeta::new(stage, cfg, upstream);
    let extra = obj(json!({"meta": meta, "losses": losses}));
    model_checkpoint(&model, extra)?.save(&layout.model(path, task))?;
    Ok(json!({"task": task.as_str(), "path": path_name(path), "samples": samples.len(), "losses": losses, "config_hash": meta.config_hash}))
}

fn load_model_ckpt(cfg: &PipelineConfig, path: &Path, what: &str, vocab: &Vocab) -> Result<(Model, ArtifactMeta)> {
    let ck = Checkpoint::load(path)?;
    let meta = ArtifactMeta::from_echo(&ck.config, what)?;
    meta.check(what, cfg)?;
    let model = restore_model(&ck, &cfg.model, vocab.n_concepts(), vocab.category_sizes())?;
    Ok((model, meta))
}

pub fn finetune(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let ckpt = layout.pretrain();
    if !ckpt.exists() {
        return Err(Error::CheckpointMissing(ckpt));
    }
    let (train, _) = load_split(cfg, layout, "train")?;
    let (graph, graph_meta) = load_graph(cfg, layout, &train.vocab)?;
    let (model, pre_meta) = load_model_ckpt(cfg, &ckpt, "pretrained model", &train.vocab)?;
    pre_meta.check_link("pretrained model", "graph", &graph_meta)?;
    if model.head.is_some() {
        return Err(Error::ConfigMismatch("pretrained checkpoint already carries a task head".into()));
    }
    let upstream = BTreeMap::from([("pretrain".to_string(), pre_meta.config_hash)]);
    train_head(cfg, layout, model, &graph, &train, HeadPath::Finetune, Stage::Finetune, upstream)
}

pub fn direct_train(cfg: &PipelineConfig, layout: &Layout) -> Result<Value> {
    let (train, _) = load_split(cfg, layout, "train")?;
    let (graph, graph_meta) = load_graph(cfg, layout, &train.vocab)?;
    let (model, upstream) = fresh_model(cfg, layout, &train.vocab, &graph_meta)?;
    train_head(cfg, layout, model, &graph, &train, HeadPath::Direct, Stage::DirectTrain, upstream)
}

/// Which network `evaluate` scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelChoice {
    Finetune,
    Direct,
    /// Freshly initialized encoder with an untrained direct head.
    Fresh,
}

impl ModelChoice {
    pub fn name(self) -> &'static str {
        match self {
            ModelChoice::Finetune => "finetune",
            ModelChoice::Direct => "direct",
            ModelChoice::Fresh => "fresh",
        }
    }
}

impl std::str::FromStr for ModelChoice {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "finetune" => Ok(ModelChoice::Finetune),
            "direct" => Ok(ModelChoice::Direct),
            "fresh" => Ok(ModelChoice::Fresh),
            _ => Err(format!("unknown model {s:?} (finetune, direct or fresh)")),
        }
    }
}

/// Labels whose positive count over `samples` is at most `max`.
pub fn rare_labels(samples: &[DownstreamSample], max: usize) -> Vec<bool> {
    let width = samples.first().map_or(0, |s| s.target.len());
    let mut support = vec![0usize; width];
    for s in samples {
        for (c, &y) in support.iter_mut().zip(&s.target) {
            *c += (y == 1.0) as usize;
        }
    }
    support.into_iter().map(|c| c <= max).collect()
}

pub fn evaluate(cfg: &PipelineConfig, layout: &Layout, choice: ModelChoice, split: &str) -> Result<MetricReport> {
    let (ds, split_meta) = load_split(cfg, layout, split)?;
    let (graph, graph_meta) = load_graph(cfg, layout, &ds.vocab)?;
    let task = cfg.finetune.task;
    let mut samples = task_samples(cfg, layout, &ds)?;
    let (model, model_hash) = match choice {
        ModelChoice::Fresh => {
            let (mut m, up) = fresh_model(cfg, layout, &ds.vocab, &graph_meta)?;
            let outputs = samples.first().map_or(0, |s| s.target.len());
            m.attach_head(HeadSpec { task, path: HeadPath::Direct, outputs }, cfg.seed)?;
            let h = fsio::sha256_hex(&serde_json::to_vec(&json!({"fresh": up, "model": cfg.model, "seed": cfg.seed})).expect("plain data"));
            (m, h)
        }
        ModelChoice::Finetune | ModelChoice::Direct => {
            let path = if choice == ModelChoice::Finetune { HeadPath::Finetune } else { HeadPath::Direct };
            let (m, meta) = load_model_ckpt(cfg, &layout.model(path, task), "trained model", &ds.vocab)?;
            if m.head.map(|h| h.task) != Some(task) {
                return Err(Error::ConfigMismatch("checkpoint head was trained for another task".into()));
            }
            (m, meta.config_hash)
        }
    };
    if task == Task::Diagnosis {
        if cfg.evaluate.non_chronic {
            samples.iter_mut().for_each(drop_chronic);
        }
        if let Some(max) = cfg.evaluate.rare_max_support {
            let (train, _) = load_split(cfg, layout, "train")?;
            let keep = rare_labels(&task_samples(cfg, layout, &train)?, max);
            samples.iter_mut().for_each(|s| restrict_labels(s, &keep));
        }
    }
    let metrics = evaluate_model(&model, &graph, &samples)?;
    let upstream = BTreeMap::from([
        ("model".to_string(), model_hash),
        (format!("split:{split}"), split_meta.config_hash),
    ]);
    let report = MetricReport {
        task: task.as_str().into(),
        seed: cfg.seed,
        split: split.into(),
        metrics,
        config_hash: Stage::Evaluate.hash(cfg, &upstream),
    };
    fsio::write_atomic(&layout.report(task, choice.name(), split), report.to_line().as_bytes())?;
    Ok(report)
}

/// The finite-difference suite, one report per primitive.
pub fn gradcheck(count: usize, seed: u64) -> Result<Vec<CheckReport>> {
    Ok(gradient_suite(count, seed)?)
}
