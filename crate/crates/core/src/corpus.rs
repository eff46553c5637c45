//! Dialogue dataset ingestion, corpus statistics, and the persona/knowledge
//! construction helpers (tuple templating and exact-match persona grounding).
//!
//! Records are JSON Lines. `documents` is parallel to `persona`: the
//! documents of persona `i` live at `documents[i]`, which is how the
//! `DOCUMENTS` source is keyed by its `PERSONA` dependency.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::registry::{SourceId, DOCUMENTS, PERSONA};
use crate::text::{content_tokens, StopWords, Tokenizer};

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: malformed JSON: {detail}")]
    Parse { line: usize, detail: String },
    #[error("line {line}: schema error at `{field}`: {detail}")]
    Schema {
        line: usize,
        field: String,
        detail: String,
    },
    #[error("line {line}: dialogue {dialogue_id}: {detail}")]
    InvariantViolation {
        line: usize,
        dialogue_id: String,
        detail: String,
    },
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("attribute {0:?} has no template and no default is configured")]
    UnknownAttribute(String),
}

impl CorpusError {
    /// 1-based line of the offending record, when there is one.
    pub fn line(&self) -> Option<usize> {
        match self {
            Self::Parse { line, .. } | Self::Schema { line, .. } | Self::InvariantViolation { line, .. } => {
                Some(*line)
            }
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Speaker {
    User,
    System,
}

impl Speaker {
    pub fn label(self) -> &'static str {
        match self {
            Self::User => "User",
            Self::System => "System",
        }
    }
}

/// Annotated sources (and the items drawn from them) behind a system turn.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct GroundingLabel {
    #[serde(default)]
    pub sources: Vec<SourceId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub persona_index: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub knowledge_indices: Option<Vec<usize>>,
}

impl GroundingLabel {
    pub fn null() -> Self {
        Self::default()
    }

    pub fn persona(index: usize) -> Self {
        Self {
            sources: vec![SourceId::persona()],
            persona_index: Some(index),
            knowledge_indices: None,
        }
    }

    pub fn both(persona: usize, knowledge: Vec<usize>) -> Self {
        Self {
            sources: vec![SourceId::persona(), SourceId::documents()],
            persona_index: Some(persona),
            knowledge_indices: Some(knowledge),
        }
    }

    pub fn uses(&self, source: &str) -> bool {
        self.sources.iter().any(|s| s.as_str() == source)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: Speaker,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub grounding: Option<GroundingLabel>,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self {
            speaker: Speaker::User,
            text: text.into(),
            grounding: None,
        }
    }

    pub fn system(text: impl Into<String>, grounding: Option<GroundingLabel>) -> Self {
        Self {
            speaker: Speaker::System,
            text: text.into(),
            grounding,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueRecord {
    pub dialogue_id: String,
    pub persona: Vec<String>,
    pub documents: Vec<Vec<String>>,
    pub turns: Vec<Turn>,
}

impl DialogueRecord {
    /// Check every record-level invariant, returning a human readable
    /// description of the first violation.
    pub fn check(&self) -> Result<(), String> {
        if self.dialogue_id.trim().is_empty() {
            return Err("dialogue_id is empty".into());
        }
        if self.documents.len() != self.persona.len() {
            return Err(format!(
                "documents has {} entries but persona has {}",
                self.documents.len(),
                self.persona.len()
            ));
        }
        if self.turns.is_empty() {
            return Err("dialogue has no turns".into());
        }
        for (i, turn) in self.turns.iter().enumerate() {
            let expected = if i % 2 == 0 { Speaker::User } else { Speaker::System };
            if turn.speaker != expected {
                return Err(format!(
                    "turn {i}: expected {} turn, found {} (turns must alternate starting with USER)",
                    expected.label(),
                    turn.speaker.label()
                ));
            }
            if turn.text.trim().is_empty() {
                return Err(format!("turn {i}: text is empty"));
            }
            match (turn.speaker, &turn.grounding) {
                (Speaker::User, Some(_)) => return Err(format!("turn {i}: USER turn carries a grounding label")),
                (Speaker::System, Some(g)) => self.check_grounding(g).map_err(|e| format!("turn {i}: {e}"))?,
                _ => {}
            }
        }
        Ok(())
    }

    fn check_grounding(&self, g: &GroundingLabel) -> Result<(), String> {
        let names: Vec<&str> = g.sources.iter().map(SourceId::as_str).collect();
        let has_persona = match names.as_slice() {
            [] => false,
            [PERSONA] | [PERSONA, DOCUMENTS] => true,
            _ => {
                return Err(format!(
                    "grounding sources {names:?} not one of [], [PERSONA], [PERSONA, DOCUMENTS]"
                ))
            }
        };
        let has_documents = names.len() == 2;
        match (has_persona, g.persona_index) {
            (true, None) => return Err("PERSONA grounding without persona_index".into()),
            (false, Some(_)) => return Err("persona_index given but PERSONA not in sources".into()),
            (true, Some(p)) if p >= self.persona.len() => {
                return Err(format!(
                    "persona_index {p} out of range ({} personas)",
                    self.persona.len()
                ))
            }
            _ => {}
        }
        match (has_documents, &g.knowledge_indices) {
            (true, None) => Err("DOCUMENTS grounding without knowledge_indices".into()),
            (false, Some(_)) => Err("knowledge_indices given but DOCUMENTS not in sources".into()),
            (true, Some(ks)) => {
                if ks.is_empty() {
                    return Err("knowledge_indices is empty".into());
                }
                let p = g.persona_index.expect("checked above");
                let n_docs = self.documents[p].len();
                match ks.iter().find(|&&k| k >= n_docs) {
                    Some(k) => Err(format!(
                        "knowledge index {k} out of range ({n_docs} documents for persona {p})"
                    )),
                    None => Ok(()),
                }
            }
            (false, None) => Ok(()),
        }
    }

    /// Indices of system turns; each is one evaluation sample.
    pub fn system_turns(&self) -> impl Iterator<Item = usize> + '_ {
        self.turns
            .iter()
            .enumerate()
            .filter(|(_, t)| t.speaker == Speaker::System)
            .map(|(i, _)| i)
    }

    /// Dialogue context preceding turn `turn_index`.
    pub fn context_before(&self, turn_index: usize) -> DialogueContext {
        DialogueContext::from_turns(&self.turns[..turn_index])
    }

    pub fn sample_id(&self, turn_index: usize) -> String {
        format!("{}#{}", self.dialogue_id, turn_index)
    }

    /// Gold persona sentence for a grounding label, if any.
    pub fn gold_persona(&self, g: &GroundingLabel) -> Option<&str> {
        g.persona_index.and_then(|p| self.persona.get(p)).map(String::as_str)
    }

    /// Gold knowledge sentences for a grounding label, in label order.
    pub fn gold_knowledge(&self, g: &GroundingLabel) -> Vec<&str> {
        match (g.persona_index, &g.knowledge_indices) {
            (Some(p), Some(ks)) => ks
                .iter()
                .filter_map(|&k| self.documents.get(p).and_then(|d| d.get(k)))
                .map(String::as_str)
                .collect(),
            _ => Vec::new(),
        }
    }
}

/// One utterance of a dialogue context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub speaker: Speaker,
    pub text: String,
}

/// Alternating user/system turns preceding the response to generate.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct DialogueContext {
    pub turns: Vec<Utterance>,
}

impl DialogueContext {
    pub fn from_turns(turns: &[Turn]) -> Self {
        Self {
            turns: turns
                .iter()
                .map(|t| Utterance {
                    speaker: t.speaker,
                    text: t.text.clone(),
                })
                .collect(),
        }
    }

    pub fn push(&mut self, speaker: Speaker, text: impl Into<String>) {
        self.turns.push(Utterance {
            speaker,
            text: text.into(),
        });
    }

    pub fn is_empty(&self) -> bool {
        self.turns.is_empty()
    }

    pub fn has_user_turn(&self) -> bool {
        self.turns.iter().any(|u| u.speaker == Speaker::User)
    }

    /// `User: ...` / `System: ...` lines joined with newlines.
    pub fn transcript(&self) -> String {
        self.turns
            .iter()
            .map(|u| format!("{}: {}", u.speaker.label(), u.text))
            .collect::<Vec<_>>()
            .join("\n")
    }

    /// Retrieval query: the last `window` turns (all when `None`) joined with a space.
    pub fn query_text(&self, window: Option<usize>) -> String {
        let skip = window.map_or(0, |w| self.turns.len().saturating_sub(w));
        self.turns[skip..]
            .iter()
            .map(|u| u.text.as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }
}

fn parse_line(line_no: usize, line: &str) -> Result<DialogueRecord, CorpusError> {
    let value: serde_json::Value = serde_json::from_str(line).map_err(|e| CorpusError::Parse {
        line: line_no,
        detail: e.to_string(),
    })?;
    let record: DialogueRecord = serde_path_to_error::deserialize(value).map_err(|e| {
        let field = e.path().to_string();
        CorpusError::Schema {
            line: line_no,
            field,
            detail: e.into_inner().to_string(),
        }
    })?;
    record.check().map_err(|detail| CorpusError::InvariantViolation {
        line: line_no,
        dialogue_id: record.dialogue_id.clone(),
        detail,
    })?;
    Ok(record)
}

/// Outcome of linting a dataset: every valid record plus every error found.
#[derive(Debug, Default)]
pub struct LintReport {
    pub records: Vec<DialogueRecord>,
    pub errors: Vec<CorpusError>,
    pub lines: usize,
}

impl LintReport {
    pub fn is_clean(&self) -> bool {
        self.errors.is_empty()
    }
}

/// Read every line, collecting all errors instead of stopping at the first.
pub fn lint_reader<R: BufRead>(reader: R) -> Result<LintReport, CorpusError> {
    let mut report = LintReport::default();
    let mut ids: HashSet<String> = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let line_no = i + 1;
        report.lines = line_no;
        if line.trim().is_empty() {
            continue;
        }
        match parse_line(line_no, &line) {
            Ok(record) => {
                if !ids.insert(record.dialogue_id.clone()) {
                    report.errors.push(CorpusError::InvariantViolation {
                        line: line_no,
                        dialogue_id: record.dialogue_id,
                        detail: "duplicate dialogue_id".into(),
                    });
                } else {
                    report.records.push(record);
                }
            }
            Err(e) => report.errors.push(e),
        }
    }
    Ok(report)
}

pub fn lint_dataset(path: &Path) -> Result<LintReport, CorpusError> {
    lint_reader(BufReader::new(File::open(path)?))
}

/// Load a dataset, failing on the first invalid line.
pub fn read_dataset<R: BufRead>(reader: R) -> Result<Vec<DialogueRecord>, CorpusError> {
    let mut report = lint_reader(reader)?;
    if report.errors.is_empty() {
        Ok(report.records)
    } else {
        Err(report.errors.swap_remove(0))
    }
}

pub fn load_dataset(path: &Path) -> Result<Vec<DialogueRecord>, CorpusError> {
    read_dataset(BufReader::new(File::open(path)?))
}

pub fn write_dataset<W: Write>(records: &[DialogueRecord], mut writer: W) -> io::Result<()> {
    for r in records {
        serde_json::to_writer(&mut writer, r)?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub n_dialogues: usize,
    pub n_samples: usize,
    pub avg_turns: f64,
    pub n_utterances: usize,
    pub avg_length: f64,
    pub frac_resp_with_persona: f64,
    pub frac_resp_with_p_and_k: f64,
    /// Counts of gold decisions among labelled system turns: NULL, PERSONA, both.
    pub decision_counts: BTreeMap<String, usize>,
}

pub fn stats(records: &[DialogueRecord], tokenizer: &dyn Tokenizer) -> Result<CorpusStats, CorpusError> {
    if records.is_empty() {
        return Err(CorpusError::EmptyCorpus);
    }
    let mut n_samples = 0usize;
    let mut n_utterances = 0usize;
    let mut total_tokens = 0usize;
    let mut with_persona = 0usize;
    let mut with_both = 0usize;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for r in records {
        for t in &r.turns {
            n_utterances += 1;
            total_tokens += tokenizer.tokenize(&t.text).len();
            if t.speaker != Speaker::System {
                continue;
            }
            n_samples += 1;
            if let Some(g) = &t.grounding {
                let p = g.uses(PERSONA);
                let d = g.uses(DOCUMENTS);
                with_persona += usize::from(p);
                with_both += usize::from(p && d);
                let class = match (p, d) {
                    (true, true) => "BOTH",
                    (true, false) => "PERSONA",
                    _ => "NULL",
                };
                *counts.entry(class.to_owned()).or_default() += 1;
            }
        }
    }
    let frac = |n: usize| if n_samples == 0 { 0.0 } else { n as f64 / n_samples as f64 };
    Ok(CorpusStats {
        n_dialogues: records.len(),
        n_samples,
        avg_turns: n_samples as f64 / records.len() as f64,
        n_utterances,
        avg_length: if n_utterances == 0 {
            0.0
        } else {
            total_tokens as f64 / n_utterances as f64
        },
        frac_resp_with_persona: frac(with_persona),
        frac_resp_with_p_and_k: frac(with_both),
        decision_counts: counts,
    })
}

/// `(head entity, attribute, tail entity)` from a knowledge base.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct KnowledgeTuple {
    pub head: String,
    pub attribute: String,
    pub tail: String,
}

impl KnowledgeTuple {
    pub fn new(head: impl Into<String>, attribute: impl Into<String>, tail: impl Into<String>) -> Self {
        Self {
            head: head.into(),
            attribute: attribute.into(),
            tail: tail.into(),
        }
    }

    fn is_complete(&self) -> bool {
        !(self.head.is_empty() || self.attribute.is_empty() || self.tail.is_empty())
    }
}

pub fn load_tuples(path: &Path) -> Result<Vec<KnowledgeTuple>, CorpusError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let t: KnowledgeTuple = serde_json::from_str(&line).map_err(|e| CorpusError::Parse {
            line: i + 1,
            detail: e.to_string(),
        })?;
        if !t.is_complete() {
            return Err(CorpusError::Schema {
                line: i + 1,
                field: "head/attribute/tail".into(),
                detail: "empty field".into(),
            });
        }
        out.push(t);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    /// `{head}'s {attribute} is {tail}`
    Possessive,
    /// `The {attribute} of {head} contains {tail}`
    Contains,
}

impl fmt::Display for TemplateKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Possessive => "possessive",
            Self::Contains => "contains",
        })
    }
}

/// Attribute name to sentence template.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TemplateTable {
    kinds: BTreeMap<String, TemplateKind>,
    #[serde(skip)]
    default: Option<TemplateKind>,
}

impl TemplateTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, attribute: impl Into<String>, kind: TemplateKind) -> Self {
        self.kinds.insert(attribute.into(), kind);
        self
    }

    pub fn with_default(mut self, kind: TemplateKind) -> Self {
        self.default = Some(kind);
        self
    }

    pub fn load(path: &Path) -> Result<Self, CorpusError> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| CorpusError::Parse {
            line: e.line(),
            detail: e.to_string(),
        })
    }

    pub fn kind_of(&self, attribute: &str) -> Option<TemplateKind> {
        self.kinds.get(attribute).copied().or(self.default)
    }
}

/// Verbalize a tuple with its attribute's template.
pub fn render_tuple(tuple: &KnowledgeTuple, table: &TemplateTable) -> Result<String, CorpusError> {
    let kind = table
        .kind_of(&tuple.attribute)
        .ok_or_else(|| CorpusError::UnknownAttribute(tuple.attribute.clone()))?;
    Ok(match kind {
        TemplateKind::Possessive => format!("{}'s {} is {}", tuple.head, tuple.attribute, tuple.tail),
        TemplateKind::Contains => format!("The {} of {} contains {}", tuple.attribute, tuple.head, tuple.tail),
    })
}

/// Tuples whose head or tail exactly equals a content token of `persona`.
///
/// Tokens are stopword-filtered and deduplicated first. Output keeps input
/// order and contains each distinct tuple once.
pub fn match_persona_knowledge(
    persona: &str,
    tuples: &[KnowledgeTuple],
    tokenizer: &dyn Tokenizer,
    stopwords: &StopWords,
) -> Vec<KnowledgeTuple> {
    let tokens: HashSet<&str> = content_tokens(tokenizer, stopwords, persona).into_iter().collect();
    if tokens.is_empty() {
        return Vec::new();
    }
    let mut seen = HashSet::new();
    tuples
        .iter()
        .filter(|t| tokens.contains(t.head.as_str()) || tokens.contains(t.tail.as_str()))
        .filter(|t| seen.insert(*t))
        .cloned()
        .collect()
}

/// A persona sentence with the knowledge sentences behind it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroundedPersona {
    pub persona: String,
    pub knowledge: Vec<String>,
}

/// Match every persona against the tuple store and verbalize the hits.
///
/// Personas with no matching tuple are dropped; repeated sentences are
/// removed. Tuples whose attribute has no template are skipped.
pub fn ground_personas(
    personas: &[String],
    tuples: &[KnowledgeTuple],
    table: &TemplateTable,
    tokenizer: &dyn Tokenizer,
    stopwords: &StopWords,
) -> Vec<GroundedPersona> {
    personas
        .iter()
        .filter_map(|p| {
            let mut seen = HashSet::new();
            let knowledge: Vec<String> = match_persona_knowledge(p, tuples, tokenizer, stopwords)
                .iter()
                .filter_map(|t| render_tuple(t, table).ok())
                .filter(|s| seen.insert(s.clone()))
                .collect();
            (!knowledge.is_empty()).then(|| GroundedPersona {
                persona: p.clone(),
                knowledge,
            })
        })
        .collect()
}
