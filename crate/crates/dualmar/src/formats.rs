//! Text formats exchanged between stages: triple TSV, the normalized-KG
//! archive, cross-reference tables, EHR JSON Lines with its vocabulary
//! sidecar, oracle transcripts, co-occurrence matrices, metric reports and
//! the polar-embedding export.

use std::collections::BTreeMap;
use std::path::Path;

use dualmar_core::ehr::{EhrDataset, RawPatient, Vocab, VocabFile};
use dualmar_core::graph::CoOccurrence;
use dualmar_core::kg::{
    parse_triple_tsv, Category, CodeSystem, CrossRefTable, Entity, KnowledgeGraph, RawTriple, Relation, Source, Triple,
};
use dualmar_core::kge::PolarTable;
use dualmar_core::metrics::MetricSet;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::fsio;

fn format_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        line,
        msg: msg.into(),
    }
}

fn clean_field(path: &Path, s: &str) -> Result<()> {
    if s.contains(['\t', '\n', '\r']) {
        return Err(format_err(path, 0, format!("field {s:?} contains a tab or line break")));
    }
    Ok(())
}

/// Tab-separated lines with exactly `n` fields, blank lines skipped.
fn tsv_rows<'a>(text: &'a str, path: &'a Path, n: usize) -> impl Iterator<Item = Result<(usize, Vec<&'a str>)>> + 'a {
    text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()).map(move |(i, l)| {
        let l = l.strip_suffix('\r').unwrap_or(l);
        let f: Vec<&str> = l.split('\t').collect();
        if f.len() == n {
            Ok((i + 1, f))
        } else {
            Err(format_err(path, i + 1, format!("expected {n} tab-separated fields, found {}", f.len())))
        }
    })
}

fn parse_id(path: &Path, line: usize, s: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| format_err(path, line, format!("bad id {s:?}")))
}

pub fn read_triple_tsv(path: &Path) -> Result<Vec<RawTriple>> {
    let text = fsio::read_text(path)?;
    parse_triple_tsv(&text).map_err(|e| match e {
        dualmar_core::kg::KgError::MalformedLine(n) => format_err(path, n, "malformed triple line"),
        other => other.into(),
    })
}

pub fn write_triple_tsv(path: &Path, triples: &[RawTriple]) -> Result<()> {
    let mut s = String::new();
    for t in triples {
        for f in [&t.head, &t.relation, &t.tail] {
            clean_field(path, f)?;
        }
        s.push_str(&dualmar_core::kg::format_triple_line(t));
    }
    fsio::write_atomic(path, s.as_bytes())
}

/// Cross-reference table as `system<TAB>key<TAB>code` lines.
pub fn read_xref(path: &Path) -> Result<CrossRefTable> {
    let text = fsio::read_text(path)?;
    let mut table = CrossRefTable::new();
    for row in tsv_rows(&text, path, 3) {
        let (line, f) = row?;
        let system: CodeSystem = f[0].parse().map_err(|_| format_err(path, line, format!("unknown system {:?}", f[0])))?;
        table.insert(system, f[1].trim(), f[2].trim())?;
    }
    Ok(table)
}

pub const ENTITIES_FILE: &str = "entities.tsv";
pub const RELATIONS_FILE: &str = "relations.tsv";
pub const TRIPLES_FILE: &str = "triples.tsv";

/// Writes the archive files into `dir` (created if needed).
pub fn write_kg_archive(dir: &Path, g: &KnowledgeGraph) -> Result<()> {
    let mut ents = String::new();
    for e in g.entities() {
        clean_field(dir, &e.surface)?;
        let code = e.code.as_deref().unwrap_or("");
        ents.push_str(&format!("{}\t{}\t{}\t{}\n", e.id, e.surface, e.category, code));
    }
    let mut rels = String::new();
    for r in g.relations() {
        clean_field(dir, &r.label)?;
        rels.push_str(&format!("{}\t{}\n", r.id, r.label));
    }
    let mut trs = String::new();
    for t in g.triples() {
        trs.push_str(&format!("{}\t{}\t{}\t{}\n", t.head, t.relation, t.tail, t.source.as_str()));
    }
    fsio::write_atomic(&dir.join(ENTITIES_FILE), ents.as_bytes())?;
    fsio::write_atomic(&dir.join(RELATIONS_FILE), rels.as_bytes())?;
    fsio::write_atomic(&dir.join(TRIPLES_FILE), trs.as_bytes())
}

pub fn read_kg_archive(dir: &Path) -> Result<KnowledgeGraph> {
    let path = dir.join(ENTITIES_FILE);
    let text = fsio::read_text(&path)?;
    let mut entities = Vec::new();
    for row in tsv_rows(&text, &path, 4) {
        let (line, f) = row?;
        let category: Category = f[2].parse().map_err(|_| format_err(&path, line, format!("bad category {:?}", f[2])))?;
        entities.push(Entity {
            id: parse_id(&path, line, f[0])?,
            surface: f[1].to_string(),
            category,
            code: (!f[3].is_empty()).then(|| f[3].to_string()),
        });
    }
    let path = dir.join(RELATIONS_FILE);
    let text = fsio::read_text(&path)?;
    let mut relations = Vec::new();
    for row in tsv_rows(&text, &path, 2) {
        let (line, f) = row?;
        relations.push(Relation {
            id: parse_id(&path, line, f[0])?,
            label: f[1].to_string(),
        });
    }
    let path = dir.join(TRIPLES_FILE);
    let text = fsio::read_text(&path)?;
    let mut triples = Vec::new();
    for row in tsv_rows(&text, &path, 4) {
        let (line, f) = row?;
        let source: Source = f[3].parse().map_err(|_| format_err(&path, line, format!("bad source {:?}", f[3])))?;
        triples.push(Triple {
            head: parse_id(&path, line, f[0])?,
            relation: parse_id(&path, line, f[1])?,
            tail: parse_id(&path, line, f[2])?,
            source,
        });
    }
    Ok(KnowledgeGraph::from_parts(entities, relations, triples)?)
}

pub fn write_vocab(path: &Path, vocab: &Vocab) -> Result<()> {
    fsio::write_json(path, &vocab.to_file())
}

pub fn read_vocab(path: &Path) -> Result<Vocab> {
    let file: VocabFile = fsio::read_json(path)?;
    Ok(Vocab::new(file)?)
}

pub fn write_ehr_jsonl(path: &Path, ds: &EhrDataset) -> Result<()> {
    fsio::write_atomic(path, fsio::to_jsonl(&ds.to_raw()).as_bytes())
}

/// Loads patients against `vocab`; codes outside it are errors that carry
/// the 1-based line number.
pub fn read_ehr_jsonl(path: &Path, vocab: Vocab) -> Result<EhrDataset> {
    let text = fsio::read_text(path)?;
    let mut raw = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let p: RawPatient = serde_json::from_str(line).map_err(|e| format_err(path, i + 1, e.to_string()))?;
        raw.push((i + 1, p));
    }
    Ok(EhrDataset::from_raw(vocab, raw)?)
}

/// One oracle call: the SHA-256 of the prompt, the call index within its
/// spec, and the raw response.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TranscriptRecord {
    pub prompt_hash: String,
    pub pass: usize,
    pub response: String,
}

pub fn prompt_hash(prompt: &str) -> String {
    fsio::sha256_hex(prompt.as_bytes())
}

/// Transcript lookup keyed by `(prompt hash, pass)`; later records win.
#[derive(Debug, Clone, Default)]
pub struct Transcript {
    records: BTreeMap<(String, usize), String>,
}

impl Transcript {
    pub fn read(path: &Path) -> Result<Self> {
        let recs: Vec<TranscriptRecord> = fsio::read_jsonl(path)?;
        Ok(Self::from_records(recs))
    }

    pub fn from_records(recs: impl IntoIterator<Item = TranscriptRecord>) -> Self {
        let records = recs.into_iter().map(|r| ((r.prompt_hash, r.pass), r.response)).collect();
        Self { records }
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn lookup(&self, prompt: &str, pass: usize) -> Option<&str> {
        self.records.get(&(prompt_hash(prompt), pass)).map(String::as_str)
    }
}

impl dualmar_core::harvest::Oracle for &Transcript {
    fn complete(&mut self, prompt: &str, call: usize) -> std::result::Result<String, String> {
        self.lookup(prompt, call)
            .map(str::to_string)
            .ok_or_else(|| format!("no transcript record for prompt {} pass {call}", prompt_hash(prompt)))
    }
}

/// Header of a co-occurrence export.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MatrixHeader {
    /// Number of concepts `|C|`.
    pub n: usize,
    pub phi: f64,
    pub nnz: usize,
    /// Concept code of every node index.
    pub nodes: Vec<String>,
    pub options: dualmar_core::graph::GraphOptions,
    pub meta: crate::artifact::ArtifactMeta,
}

/// Coordinate list of `B`, one `row<TAB>col<TAB>count` line per nonzero.
pub fn write_coo(path: &Path, b: &CoOccurrence) -> Result<()> {
    let mut s = String::new();
    for (i, j, v) in b.entries() {
        s.push_str(&format!("{i}\t{j}\t{v}\n"));
    }
    fsio::write_atomic(path, s.as_bytes())
}

pub fn read_coo(path: &Path, n: usize) -> Result<CoOccurrence> {
    let text = fsio::read_text(path)?;
    let mut entries = Vec::new();
    for row in tsv_rows(&text, path, 3) {
        let (line, f) = row?;
        let v: u64 = f[2].trim().parse().map_err(|_| format_err(path, line, format!("bad count {:?}", f[2])))?;
        entries.push((parse_id(path, line, f[0])?, parse_id(path, line, f[1])?, v));
    }
    Ok(CoOccurrence::from_entries(n, entries)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricReport {
    pub task: String,
    pub seed: u64,
    pub split: String,
    pub metrics: MetricSet,
    pub config_hash: String,
}

impl MetricReport {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("serializable report");
        s.push('\n');
        s
    }
}

/// Entry of the id map stored with an embedding export.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntityMapEntry {
    pub id: usize,
    pub surface: String,
    pub code: Option<String>,
}

pub const EXPORT_ARRAYS: [&str; 4] = ["entity_modulus", "entity_phase", "relation_modulus", "relation_phase"];

/// The four polar arrays plus id maps for entities and relations; `extra`
/// lands in the configuration echo.
pub fn polar_export(
    table: &PolarTable,
    g: &KnowledgeGraph,
    extra: serde_json::Map<String, serde_json::Value>,
) -> Result<Checkpoint> {
    let entities: Vec<EntityMapEntry> = g
        .entities()
        .iter()
        .map(|e| EntityMapEntry {
            id: e.id,
            surface: e.surface.clone(),
            code: e.code.clone(),
        })
        .collect();
    let relations: Vec<(usize, String)> = g.relations().iter().map(|r| (r.id, r.label.clone())).collect();
    let mut config = extra;
    config.insert("entities".into(), serde_json::to_value(entities).expect("plain data"));
    config.insert("relations".into(), serde_json::to_value(relations).expect("plain data"));
    let mut ck = Checkpoint::new(serde_json::Value::Object(config));
    let mats = [
        &table.entity_modulus,
        &table.entity_phase,
        &table.relation_modulus,
        &table.relation_phase,
    ];
    for (name, m) in EXPORT_ARRAYS.iter().zip(mats) {
        ck.push(*name, m.clone());
    }
    Ok(ck)
}

pub fn polar_import(ck: &Checkpoint) -> Result<(PolarTable, Vec<EntityMapEntry>)> {
    let [em, ep, rm, rp] = EXPORT_ARRAYS.map(|n| ck.require(n).cloned());
    let table = PolarTable {
        entity_modulus: em?,
        entity_phase: ep?,
        relation_modulus: rm?,
        relation_phase: rp?,
    };
    let entities = ck
        .config
        .get("entities")
        .cloned()
        .ok_or_else(|| Error::CorruptCheckpoint("no entity map".into()))?;
    let entities: Vec<EntityMapEntry> =
        serde_json::from_value(entities).map_err(|e| Error::CorruptCheckpoint(format!("entity map: {e}")))?;
    if entities.len() != table.n_entities()
        || table.entity_phase.shape() != table.entity_modulus.shape()
        || table.relation_phase.shape() != table.relation_modulus.shape()
        || table.relation_modulus.cols() != table.k()
    {
        return Err(Error::CorruptCheckpoint("embedding arrays disagree in shape".into()));
    }
    Ok((table, entities))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn transcript_lookup_by_hash_and_pass() {
        let t = Transcript::from_records([
            TranscriptRecord {
                prompt_hash: prompt_hash("p"),
                pass: 0,
                response: "a".into(),
            },
            TranscriptRecord {
                prompt_hash: prompt_hash("p"),
                pass: 1,
                response: "b".into(),
            },
        ]);
        assert_eq!(t.lookup("p", 1), Some("b"));
        assert_eq!(t.lookup("p", 2), None);
        assert_eq!(t.lookup("q", 0), None);
    }

    #[test]
    fn report_line_has_expected_keys() {
        let r = MetricReport {
            task: "hf".into(),
            seed: 3,
            split: "test".into(),
            metrics: [("auc".to_string(), 0.5)].into_iter().collect(),
            config_hash: "00".into(),
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_line()).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        assert_eq!(keys, ["config_hash", "metrics", "seed", "split", "task"]);
    }
}
