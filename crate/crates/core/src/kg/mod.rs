//! Diagnosis knowledge graph: data model, triple-TSV text format, and the
//! normalization pipeline (cross-referencing, clustering, dedup).

mod cluster;
mod embed;
mod normalize;
mod xref;

pub use cluster::{agglomerate, cluster_entities, cosine, Clustering};
pub use embed::{Embedder, TrigramEmbedder, EMBED_DIM};
pub use normalize::{normalize_detailed, normalize_kg, normalize_kg_with, NormalizeConfig, Normalization};
pub use xref::{apply_cross_reference, normalize_code, valid_code, CodeSystem, CrossRefTable};

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum KgError {
    #[error("malformed triple line {0}")]
    MalformedLine(usize),
    #[error("no triples in input")]
    EmptyFile,
    #[error("cross-reference key {system}:{key} maps to both {first} and {second}")]
    ConflictingMapping {
        system: CodeSystem,
        key: String,
        first: String,
        second: String,
    },
    #[error("similarity threshold {0} outside [0, 1]")]
    InvalidThreshold(f64),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("invalid graph: {0}")]
    InvalidGraph(String),
}

pub type Result<T> = core::result::Result<T, KgError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Category {
    Disease,
    Drug,
    Phenotype,
    Other,
}

impl Category {
    pub const ALL: [Category; 4] = [
        Category::Disease,
        Category::Drug,
        Category::Phenotype,
        Category::Other,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Category::Disease => "Disease",
            Category::Drug => "Drug",
            Category::Phenotype => "Phenotype",
            Category::Other => "Other",
        }
    }

    /// Coding system whose codes this category carries, if any.
    pub fn code_system(self) -> Option<CodeSystem> {
        match self {
            Category::Disease => Some(CodeSystem::Icd9),
            Category::Drug => Some(CodeSystem::Atc),
            Category::Phenotype => Some(CodeSystem::Hpo),
            Category::Other => None,
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Category {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Category::ALL
            .into_iter()
            .find(|c| c.as_str().eq_ignore_ascii_case(t))
            .ok_or_else(|| KgError::UnknownCategory(t.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize)]
pub enum Source {
    Ontology,
    Generated,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Ontology => "Ontology",
            Source::Generated => "Generated",
        }
    }
}

impl FromStr for Source {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "Ontology" => Ok(Source::Ontology),
            "Generated" => Ok(Source::Generated),
            other => Err(KgError::InvalidGraph(alloc::format!("unknown source {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Entity {
    pub id: usize,
    pub surface: String,
    pub category: Category,
    pub code: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Relation {
    pub id: usize,
    pub label: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Triple {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
    pub source: Source,
}

/// A normalized graph. Entity and relation ids equal their vector positions;
/// no two triples share `(head, relation, tail)`.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct KnowledgeGraph {
    entities: Vec<Entity>,
    relations: Vec<Relation>,
    triples: Vec<Triple>,
}

impl KnowledgeGraph {
    /// Validates ids, self-loops and duplicate triples.
    pub fn from_parts(entities: Vec<Entity>, relations: Vec<Relation>, triples: Vec<Triple>) -> Result<Self> {
        for (i, e) in entities.iter().enumerate() {
            if e.id != i {
                return Err(KgError::InvalidGraph(alloc::format!("entity id {} at position {i}", e.id)));
            }
        }
        for (i, r) in relations.iter().enumerate() {
            if r.id != i {
                return Err(KgError::InvalidGraph(alloc::format!("relation id {} at position {i}", r.id)));
            }
        }
        let mut seen = BTreeSet::new();
        for t in &triples {
            if t.head >= entities.len() || t.tail >= entities.len() || t.relation >= relations.len() {
                return Err(KgError::InvalidGraph(alloc::format!("dangling triple {t:?}")));
            }
            if t.head == t.tail {
                return Err(KgError::InvalidGraph(alloc::format!("self-loop {t:?}")));
            }
            if !seen.insert((t.head, t.relation, t.tail)) {
                return Err(KgError::InvalidGraph(alloc::format!("duplicate triple {t:?}")));
            }
        }
        Ok(Self {
            entities,
            relations,
            triples,
        })
    }

    pub fn entities(&self) -> &[Entity] {
        &self.entities
    }

    pub fn relations(&self) -> &[Relation] {
        &self.relations
    }

    pub fn triples(&self) -> &[Triple] {
        &self.triples
    }

    pub fn entity_by_code(&self, code: &str) -> Option<&Entity> {
        self.entities.iter().find(|e| e.code.as_deref() == Some(code))
    }

    /// Triples as `(head, relation, tail)` index tuples.
    pub fn id_triples(&self) -> Vec<(usize, usize, usize)> {
        self.triples.iter().map(|t| (t.head, t.relation, t.tail)).collect()
    }

    pub fn to_raw(&self) -> RawGraph {
        RawGraph {
            entities: self
                .entities
                .iter()
                .map(|e| RawEntity {
                    surface: e.surface.clone(),
                    category: e.category,
                    source_code: e.code.clone(),
                })
                .collect(),
            relations: self.relations.iter().map(|r| r.label.clone()).collect(),
            triples: self
                .triples
                .iter()
                .map(|t| RawEdge {
                    head: t.head,
                    relation: t.relation,
                    tail: t.tail,
                    source: t.source,
                })
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KgStats {
    pub nodes: usize,
    pub edge_types: usize,
    pub triples: usize,
}

pub fn kg_stats(g: &KnowledgeGraph) -> KgStats {
    KgStats {
        nodes: g.entities.len(),
        edge_types: g.relations.len(),
        triples: g.triples.len(),
    }
}

/// One line of a triple-TSV file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
    pub head_category: Category,
    pub tail_category: Category,
}

fn parse_category_pair(tag: &str) -> Option<(Category, Category)> {
    let (a, b) = tag.trim().split_once('-')?;
    Some((a.parse().ok()?, b.parse().ok()?))
}

/// Parses triple-TSV text. Blank lines are skipped; line numbers in errors
/// are 1-based. A line whose category-pair tag does not name two known
/// categories is malformed too.
pub fn parse_triple_tsv(text: &str) -> Result<Vec<RawTriple>> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.strip_suffix('\r').unwrap_or(line);
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 4 {
            return Err(KgError::MalformedLine(n + 1));
        }
        let (head, relation, tail) = (fields[0].trim(), fields[1].trim(), fields[2].trim());
        if head.is_empty() || relation.is_empty() || tail.is_empty() {
            return Err(KgError::MalformedLine(n + 1));
        }
        let (hc, tc) = parse_category_pair(fields[3]).ok_or(KgError::MalformedLine(n + 1))?;
        out.push(RawTriple {
            head: head.to_string(),
            relation: relation.to_string(),
            tail: tail.to_string(),
            head_category: hc,
            tail_category: tc,
        });
    }
    if out.is_empty() {
        return Err(KgError::EmptyFile);
    }
    Ok(out)
}

pub fn format_triple_line(t: &RawTriple) -> String {
    alloc::format!(
        "{}\t{}\t{}\t{}-{}\n",
        t.head,
        t.relation,
        t.tail,
        t.head_category,
        t.tail_category
    )
}

/// Writes a graph as triple-TSV (surfaces only; codes and sources are not
/// part of this format).
pub fn format_triple_tsv(g: &KnowledgeGraph) -> String {
    let mut s = String::new();
    for t in &g.triples {
        let h = &g.entities[t.head];
        let tl = &g.entities[t.tail];
        s.push_str(&format_triple_line(&RawTriple {
            head: h.surface.clone(),
            relation: g.relations[t.relation].label.clone(),
            tail: tl.surface.clone(),
            head_category: h.category,
            tail_category: tl.category,
        }));
    }
    s
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawEntity {
    pub surface: String,
    pub category: Category,
    /// Code in the category's native system as delivered by the source.
    pub source_code: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RawEdge {
    pub head: usize,
    pub relation: usize,
    pub tail: usize,
    pub source: Source,
}

/// Un-normalized input: entity and relation lists may contain duplicates,
/// and edges may repeat or loop.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RawGraph {
    pub entities: Vec<RawEntity>,
    pub relations: Vec<String>,
    pub triples: Vec<RawEdge>,
}

impl RawGraph {
    /// Appends parsed triples, reusing entities with the same
    /// `(category, surface)` and relations with the same label.
    pub fn extend_from_triples(&mut self, triples: &[RawTriple], source: Source) {
        let mut ent: alloc::collections::BTreeMap<(Category, String), usize> = self
            .entities
            .iter()
            .enumerate()
            .map(|(i, e)| ((e.category, e.surface.clone()), i))
            .collect();
        let mut rel: alloc::collections::BTreeMap<String, usize> =
            self.relations.iter().enumerate().map(|(i, r)| (r.clone(), i)).collect();
        let mut entity = |g: &mut RawGraph, surface: &str, category: Category| -> usize {
            *ent.entry((category, surface.to_string())).or_insert_with(|| {
                g.entities.push(RawEntity {
                    surface: surface.to_string(),
                    category,
                    source_code: None,
                });
                g.entities.len() - 1
            })
        };
        for t in triples {
            let head = entity(self, &t.head, t.head_category);
            let tail = entity(self, &t.tail, t.tail_category);
            let relation = *rel.entry(t.relation.clone()).or_insert_with(|| {
                self.relations.push(t.relation.clone());
                self.relations.len() - 1
            });
            self.triples.push(RawEdge {
                head,
                relation,
                tail,
                source,
            });
        }
    }

    pub fn from_triples(triples: &[RawTriple], source: Source) -> Self {
        let mut g = Self::default();
        g.extend_from_triples(triples, source);
        g
    }
}
