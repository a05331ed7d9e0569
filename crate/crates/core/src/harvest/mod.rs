//! Prompt rendering and output parsing for language-model triple harvesting.
//!
//! The model itself is an injected [`Oracle`]; tests and replays use canned
//! transcripts.

use alloc::collections::BTreeSet;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::kg::{Category, RawTriple};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum HarvestError {
    #[error("invalid prompt spec: {0}")]
    InvalidSpec(&'static str),
    #[error("invalid harvest config: x must be at least 1")]
    InvalidConfig,
}

pub type Result<T> = core::result::Result<T, HarvestError>;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PromptSpec {
    pub category: String,
    pub term: String,
    pub topics: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HarvestConfig {
    /// Independent prompt passes per spec.
    pub x: usize,
    /// Extra re-reads of the identical prompt within each pass.
    pub y: usize,
}

impl Default for HarvestConfig {
    fn default() -> Self {
        Self { x: 2, y: 1 }
    }
}

/// The worked example embedded in every prompt.
pub const HEART_FAILURE_EXAMPLE: &str = "\
Disease Name: Heart Failure
Topics: Overview
Text:
Heart failure occurs when the heart muscle doesn't pump blood as well as it should. When this happens, blood often backs up and fluid can build up in the lungs, causing shortness of breath. Certain heart conditions gradually leave the heart too weak or stiff to fill and pump blood properly. These conditions include narrowed arteries in the heart and high blood pressure. Proper treatment may improve the symptoms of heart failure and may help some people live longer. Lifestyle changes can improve quality of life. Try to lose weight, exercise, use less salt and manage stress. But heart failure can be life-threatening. People with heart failure may have severe symptoms. Some may need a heart transplant or a device to help the heart pump blood. Heart failure is sometimes called congestive heart failure.

Updates:
[Heart Failure, IS_CAUSED_BY, Narrowed Arteries],
[Heart Failure, IS_CAUSED_BY, High Blood Pressure],
[Heart Failure, HAS_SYMPTOMS, Shortness of Breath],
[Heart Failure, HAS_SYMPTOMS, Fluid Build-up in Lungs],
[Heart Failure, NEEDS_TREATMENT, Proper Treatment],
[Heart Failure, NEEDS_TREATMENT, Lifestyle Changes]
";

pub fn render_prompt(spec: &PromptSpec) -> Result<String> {
    if spec.term.trim().is_empty() {
        return Err(HarvestError::InvalidSpec("term is empty"));
    }
    if spec.text.trim().is_empty() {
        return Err(HarvestError::InvalidSpec("text is empty"));
    }
    let c = spec.category.as_str();
    let t = spec.term.as_str();
    let mut p = String::new();
    p.push_str(&alloc::format!(
        "Given a crawled text about specific topic of certain {c}, please find triples related to the given {c} in terms of crawled text.\n"
    ));
    p.push_str("- Filling triples in updates based on given information and strictly following output style of example updates.\n");
    p.push_str("- Each update should follow the format of [ENTITY 1, RELATIONSHIP, ENTITY 2] with directed edge.\n");
    p.push_str(&alloc::format!(
        "- Both ENTITY 1 and ENTITY 2 should be noun, and one of them must be {t}.\n"
    ));
    p.push_str("- Just output each unique triple once, don't output repeatedly.\n");
    p.push_str(&alloc::format!(
        "- It is possible that {c} name not exactly matched in crawled text (abbreviated or partly matched), consider it as the same thing.\n"
    ));
    p.push_str("\nExample:\n## An example demo is shown below...\n\n");
    p.push_str(HEART_FAILURE_EXAMPLE);
    p.push_str(&alloc::format!(
        "\nGiven a paragraph about specific topic of certain {c}, please find triples related to the given {c} in the text.\n\n"
    ));
    p.push_str("Given Information:\n");
    p.push_str(&alloc::format!("{c} Name: {t}\n"));
    p.push_str(&alloc::format!("Topics: {}\n", spec.topics));
    p.push_str(&alloc::format!("Text: {}\n\n", spec.text));
    p.push_str("Updates:\n");
    Ok(p)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub enum RejectReason {
    Garbled,
    Incomplete,
    TermMismatch,
    Duplicate,
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GeneratedTriple {
    pub head: String,
    pub relation: String,
    pub tail: String,
}

impl GeneratedTriple {
    pub fn to_line(&self) -> String {
        alloc::format!("[{}, {}, {}]", self.head, self.relation, self.tail)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rejection {
    pub text: String,
    pub reason: RejectReason,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ParseReport {
    pub accepted: Vec<GeneratedTriple>,
    pub rejected: Vec<Rejection>,
}

fn squash(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

fn snake_upper(s: &str) -> String {
    let mut out = String::new();
    let mut gap = false;
    for ch in s.trim().chars() {
        if ch.is_whitespace() || ch == '-' || ch == '_' {
            gap = !out.is_empty();
        } else {
            if gap {
                out.push('_');
                gap = false;
            }
            out.extend(ch.to_uppercase());
        }
    }
    out
}

/// Initials of the whitespace-split term, e.g. "Heart Failure" → "hf".
fn initials(term: &str) -> String {
    term.split_whitespace()
        .filter_map(|w| w.chars().next())
        .flat_map(char::to_lowercase)
        .collect()
}

/// Whether `entity` names `term`: equal, the term's initials, or one
/// containing the other as whole words.
pub fn term_matches(entity: &str, term: &str) -> bool {
    let e = squash(entity).to_lowercase();
    let t = squash(term).to_lowercase();
    if e.is_empty() || t.is_empty() {
        return false;
    }
    if e == t {
        return true;
    }
    if t.split(' ').count() >= 2 && e == initials(&t) {
        return true;
    }
    let words = |s: &str| -> Vec<String> { s.split(' ').map(str::to_string).collect() };
    let (ew, tw) = (words(&e), words(&t));
    let contains = |hay: &[String], needle: &[String]| hay.windows(needle.len()).any(|w| w == needle);
    contains(&ew, &tw) || contains(&tw, &ew)
}

/// Candidate bracket groups in `raw`: a group starts at `[` and ends at the
/// next `]`; a newline or another `[` first means it was never closed.
fn groups(raw: &str) -> Vec<(String, bool)> {
    let mut out = Vec::new();
    let mut rest = raw;
    while let Some(start) = rest.find('[') {
        let after = &rest[start + 1..];
        let stop = after.find(['[', ']', '\n']);
        match stop {
            Some(k) if after.as_bytes()[k] == b']' => {
                out.push((after[..k].to_string(), true));
                rest = &after[k + 1..];
            }
            Some(k) => {
                out.push((after[..k].to_string(), false));
                rest = &after[k..];
            }
            None => {
                out.push((after.to_string(), false));
                rest = "";
            }
        }
    }
    out
}

/// Classifies every candidate bracket group of a model response.
pub fn parse_updates(raw: &str, term: &str) -> ParseReport {
    let mut report = ParseReport::default();
    let found = groups(raw);
    if found.is_empty() {
        report.rejected.push(Rejection {
            text: raw.to_string(),
            reason: RejectReason::Garbled,
        });
        return report;
    }
    let mut seen = BTreeSet::new();
    for (body, closed) in found {
        let text = if closed {
            alloc::format!("[{body}]")
        } else {
            alloc::format!("[{body}")
        };
        let trimmed = body.trim_end();
        let reject = |report: &mut ParseReport, reason| {
            report.rejected.push(Rejection {
                text: text.clone(),
                reason,
            })
        };
        if !closed || trimmed.ends_with("...") || trimmed.ends_with('…') {
            reject(&mut report, RejectReason::Incomplete);
            continue;
        }
        let fields: Vec<String> = body.split(',').map(squash).collect();
        if fields.len() != 3 || fields.iter().any(|f| f.is_empty()) {
            reject(&mut report, RejectReason::Garbled);
            continue;
        }
        let relation = snake_upper(&fields[1]);
        if relation.is_empty() {
            reject(&mut report, RejectReason::Garbled);
            continue;
        }
        if !term_matches(&fields[0], term) && !term_matches(&fields[2], term) {
            reject(&mut report, RejectReason::TermMismatch);
            continue;
        }
        let t = GeneratedTriple {
            head: fields[0].clone(),
            relation,
            tail: fields[2].clone(),
        };
        if !seen.insert(t.clone()) {
            reject(&mut report, RejectReason::Duplicate);
            continue;
        }
        report.accepted.push(t);
    }
    report
}

/// A text-to-text model. `call` numbers the calls made for one spec, so a
/// replay cache can tell re-reads apart.
pub trait Oracle {
    fn complete(&mut self, prompt: &str, call: usize) -> core::result::Result<String, String>;
}

impl<F> Oracle for F
where
    F: FnMut(&str, usize) -> core::result::Result<String, String>,
{
    fn complete(&mut self, prompt: &str, call: usize) -> core::result::Result<String, String> {
        self(prompt, call)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OracleFailure {
    pub spec: usize,
    pub pass: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HarvestOutcome {
    /// Deduplicated union in first-seen order over (spec, pass).
    pub triples: Vec<RawTriple>,
    /// Parse report per oracle call, tagged `(spec, call)`.
    pub reports: Vec<(usize, usize, ParseReport)>,
    pub failures: Vec<OracleFailure>,
}

/// Runs `x` passes of `1 + y` identical prompts per spec and unions the
/// accepted triples. The entity matching the term takes the spec's category;
/// the other side is `Other`.
pub fn harvest(specs: &[PromptSpec], oracle: &mut dyn Oracle, cfg: &HarvestConfig) -> Result<HarvestOutcome> {
    if cfg.x < 1 {
        return Err(HarvestError::InvalidConfig);
    }
    let mut out = HarvestOutcome::default();
    let mut seen = BTreeSet::new();
    for (si, spec) in specs.iter().enumerate() {
        let prompt = render_prompt(spec)?;
        let cat: Category = spec.category.parse().unwrap_or(Category::Other);
        for pass in 0..cfg.x {
            for reread in 0..=cfg.y {
                let call = pass * (cfg.y + 1) + reread;
                let response = match oracle.complete(&prompt, call) {
                    Ok(r) => r,
                    Err(message) => {
                        out.failures.push(OracleFailure {
                            spec: si,
                            pass: call,
                            message,
                        });
                        continue;
                    }
                };
                let report = parse_updates(&response, &spec.term);
                for t in &report.accepted {
                    let head_is_term = term_matches(&t.head, &spec.term);
                    let tail_is_term = term_matches(&t.tail, &spec.term);
                    let raw = RawTriple {
                        head: t.head.clone(),
                        relation: t.relation.clone(),
                        tail: t.tail.clone(),
                        head_category: if head_is_term { cat } else { Category::Other },
                        tail_category: if tail_is_term { cat } else { Category::Other },
                    };
                    let key = (raw.head.clone(), raw.relation.clone(), raw.tail.clone(), raw.head_category, raw.tail_category);
                    if seen.insert(key) {
                        out.triples.push(raw);
                    }
                }
                out.reports.push((si, call, report));
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn hf_spec() -> PromptSpec {
        PromptSpec {
            category: "Disease".into(),
            term: "Heart Failure".into(),
            topics: "Overview".into(),
            text: "Heart failure occurs when the heart muscle does not pump well.".into(),
        }
    }

    #[test]
    fn prompt_contains_given_information() {
        let p = render_prompt(&hf_spec()).unwrap();
        assert!(p.lines().any(|l| l == "Disease Name: Heart Failure"));
        assert!(p.ends_with("Updates:\n"));
        assert_eq!(p, render_prompt(&hf_spec()).unwrap());
        let mut bad = hf_spec();
        bad.term = " ".into();
        assert_eq!(render_prompt(&bad), Err(HarvestError::InvalidSpec("term is empty")));
    }

    #[test]
    fn example_block_yields_six() {
        let r = parse_updates(HEART_FAILURE_EXAMPLE, "Heart Failure");
        assert_eq!(r.accepted.len(), 6);
        assert!(r.rejected.is_empty());
        assert_eq!(r.accepted[0].to_line(), "[Heart Failure, IS_CAUSED_BY, Narrowed Arteries]");
    }

    #[test]
    fn rejection_reasons() {
        let r = parse_updates(
            "[Heart Failure, HAS_SYMPTOMS, ...]\n[Heart Failure, HAS_SYMPTOMS, Edema\n[Aspirin, TREATS, Fever]\n\
             [HF, has symptoms, Edema]\n[HF, HAS_SYMPTOMS, Edema]\n[a, b]\n",
            "Heart Failure",
        );
        let reasons: Vec<_> = r.rejected.iter().map(|x| x.reason).collect();
        assert_eq!(
            reasons,
            vec![
                RejectReason::Incomplete,
                RejectReason::Incomplete,
                RejectReason::TermMismatch,
                RejectReason::Duplicate,
                RejectReason::Garbled
            ]
        );
        assert_eq!(r.accepted.len(), 1);
        assert_eq!(r.accepted[0].relation, "HAS_SYMPTOMS");
    }

    #[test]
    fn empty_text_is_one_garbled() {
        let r = parse_updates("", "x");
        assert!(r.accepted.is_empty());
        assert_eq!(r.rejected.len(), 1);
        assert_eq!(r.rejected[0].reason, RejectReason::Garbled);
    }

    #[test]
    fn repeated_passes_dedup() {
        let mut oracle = |_: &str, _: usize| Ok::<_, String>("[Heart Failure, IS_CAUSED_BY, Hypertension]".to_string());
        let out = harvest(&[hf_spec()], &mut oracle, &HarvestConfig { x: 2, y: 1 }).unwrap();
        assert_eq!(out.triples.len(), 1);
        assert_eq!(out.reports.len(), 4);
        assert_eq!(out.triples[0].head_category, Category::Disease);
        assert_eq!(out.triples[0].tail_category, Category::Other);
    }

    #[test]
    fn failures_are_recorded() {
        let mut oracle = |_: &str, call: usize| {
            if call == 0 {
                Err("timeout".to_string())
            } else {
                Ok(String::new())
            }
        };
        let out = harvest(&[hf_spec()], &mut oracle, &HarvestConfig { x: 1, y: 1 }).unwrap();
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.reports.len(), 1);
        assert!(out.triples.is_empty());
    }
}
