use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use super::{Category, KgError, RawGraph, Result};

/// Key space of a cross-reference entry. `Name` keys are entity surfaces;
/// the others are codes in a coding system.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum CodeSystem {
    Name,
    Icd9,
    Atc,
    Hpo,
}

impl CodeSystem {
    pub fn as_str(self) -> &'static str {
        match self {
            CodeSystem::Name => "NAME",
            CodeSystem::Icd9 => "ICD9",
            CodeSystem::Atc => "ATC",
            CodeSystem::Hpo => "HPO",
        }
    }
}

impl fmt::Display for CodeSystem {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for CodeSystem {
    type Err = KgError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "NAME" => Ok(CodeSystem::Name),
            "ICD9" | "ICD-9" | "ICD9CM" | "ICD-9-CM" => Ok(CodeSystem::Icd9),
            "ATC" => Ok(CodeSystem::Atc),
            "HPO" => Ok(CodeSystem::Hpo),
            other => Err(KgError::InvalidGraph(alloc::format!("unknown code system {other:?}"))),
        }
    }
}

fn all_digits(s: &str) -> bool {
    !s.is_empty() && s.bytes().all(|b| b.is_ascii_digit())
}

fn icd9_ok(code: &str) -> bool {
    let (stem, frac) = match code.split_once('.') {
        Some((s, f)) => (s, Some(f)),
        None => (code, None),
    };
    let frac_ok = |max: usize| frac.is_none_or(|f| all_digits(f) && f.len() <= max);
    match stem.as_bytes().first() {
        Some(b'V') => stem.len() == 3 && all_digits(&stem[1..]) && frac_ok(2),
        Some(b'E') => stem.len() == 4 && all_digits(&stem[1..]) && frac_ok(1),
        _ => stem.len() == 3 && all_digits(stem) && frac_ok(2),
    }
}

fn atc_level(code: &str) -> Option<u8> {
    let b = code.as_bytes();
    let head = b.len() >= 5
        && b[0].is_ascii_uppercase()
        && b[1].is_ascii_digit()
        && b[2].is_ascii_digit()
        && b[3].is_ascii_uppercase()
        && b[4].is_ascii_uppercase();
    match b.len() {
        5 if head => Some(4),
        7 if head && b[5].is_ascii_digit() && b[6].is_ascii_digit() => Some(5),
        _ => None,
    }
}

fn hpo_ok(code: &str) -> bool {
    code.strip_prefix("HP:").is_some_and(|d| d.len() == 7 && all_digits(d))
}

/// Whether `code` is a well-formed normalized code in `system` (ICD-9-CM,
/// ATC level 4, or HPO).
pub fn valid_code(system: CodeSystem, code: &str) -> bool {
    match system {
        CodeSystem::Name => !code.trim().is_empty(),
        CodeSystem::Icd9 => icd9_ok(code),
        CodeSystem::Atc => atc_level(code) == Some(4),
        CodeSystem::Hpo => hpo_ok(code),
    }
}

/// Canonical form of a source code, or `None` if it is not a code of
/// `system`. ATC level-5 codes are truncated to their level-4 prefix.
pub fn normalize_code(system: CodeSystem, raw: &str) -> Option<String> {
    let c = raw.trim().to_ascii_uppercase();
    match system {
        CodeSystem::Name => None,
        CodeSystem::Atc => match atc_level(&c)? {
            4 => Some(c),
            _ => Some(c[..5].to_string()),
        },
        _ => valid_code(system, &c).then_some(c),
    }
}

fn normalize_key(system: CodeSystem, key: &str) -> String {
    match system {
        CodeSystem::Name => key.split_whitespace().collect::<Vec<_>>().join(" ").to_lowercase(),
        _ => key.trim().to_ascii_uppercase(),
    }
}

/// Deterministic map from `(system, key)` to a normalized code.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CrossRefTable {
    map: BTreeMap<(CodeSystem, String), String>,
}

impl CrossRefTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries<'a>(entries: impl IntoIterator<Item = (CodeSystem, &'a str, &'a str)>) -> Result<Self> {
        let mut t = Self::new();
        for (s, k, c) in entries {
            t.insert(s, k, c)?;
        }
        Ok(t)
    }

    /// Adds an entry. Re-adding the same mapping is a no-op; mapping a key
    /// to a second code is an error.
    pub fn insert(&mut self, system: CodeSystem, key: &str, code: &str) -> Result<()> {
        let k = normalize_key(system, key);
        let code = code.trim().to_string();
        match self.map.get(&(system, k.clone())) {
            Some(prev) if *prev != code => Err(KgError::ConflictingMapping {
                system,
                key: k,
                first: prev.clone(),
                second: code,
            }),
            Some(_) => Ok(()),
            None => {
                self.map.insert((system, k), code);
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn get(&self, system: CodeSystem, key: &str) -> Option<&str> {
        self.map.get(&(system, normalize_key(system, key))).map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (CodeSystem, &str, &str)> {
        self.map.iter().map(|((s, k), c)| (*s, k.as_str(), c.as_str()))
    }

    /// Normalized code for an entity, if any.
    ///
    /// A source code is looked up in the table first and otherwise used
    /// directly when it is valid for the category's system; without a source
    /// code the surface is looked up. Code-to-code entries are followed to
    /// their end so that resolving an already-resolved code is a no-op.
    pub fn resolve(&self, category: Category, surface: &str, source_code: Option<&str>) -> Result<Option<String>> {
        let Some(system) = category.code_system() else {
            return Ok(None);
        };
        let start = match source_code {
            Some(c) => self
                .get(system, c)
                .map(str::to_string)
                .or_else(|| normalize_code(system, c)),
            None => None,
        };
        let Some(mut code) = start.or_else(|| self.get(CodeSystem::Name, surface).map(str::to_string)) else {
            return Ok(None);
        };
        let mut seen = alloc::collections::BTreeSet::new();
        loop {
            let Some(norm) = normalize_code(system, &code) else {
                return Ok(None);
            };
            if !seen.insert(norm.clone()) {
                return Err(KgError::ConflictingMapping {
                    system,
                    key: norm,
                    first: code,
                    second: String::from("<cycle>"),
                });
            }
            match self.get(system, &norm) {
                Some(next) if normalize_code(system, next).as_deref() != Some(norm.as_str()) => {
                    code = next.to_string();
                }
                _ => return Ok(Some(norm)),
            }
        }
    }
}

/// Per-entity normalized codes plus the ids left without one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CrossRefOutcome {
    pub codes: Vec<Option<String>>,
    pub unmatched: Vec<usize>,
}

pub fn apply_cross_reference(raw: &RawGraph, xref: &CrossRefTable) -> Result<CrossRefOutcome> {
    let mut codes = Vec::with_capacity(raw.entities.len());
    let mut unmatched = Vec::new();
    for (i, e) in raw.entities.iter().enumerate() {
        let c = xref.resolve(e.category, &e.surface, e.source_code.as_deref())?;
        if c.is_none() {
            unmatched.push(i);
        }
        codes.push(c);
    }
    Ok(CrossRefOutcome { codes, unmatched })
}
