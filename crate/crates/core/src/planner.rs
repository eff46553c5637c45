//! Source planning: the decision format, parsing of free-form planner
//! output, and the planning prompt.

use std::fmt;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{BackendError, GenerationBackend, GenerationParams, GenerationRequest};
use crate::corpus::{DialogueContext, DialogueRecord};
use crate::registry::{RegistryError, SourceId, SourceRegistry, DOCUMENTS, PERSONA};

pub const PLANNING_TEMPLATE_EN: &str = include_str!("../templates/planning_en.txt");

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlannerError {
    #[error("source {0} has no description")]
    MissingDescription(SourceId),
    #[error("precondition failed: {0}")]
    Precondition(String),
    #[error("template error: {0}")]
    Template(String),
    #[error("{sample_id}: {source}")]
    Backend {
        sample_id: String,
        #[source]
        source: BackendError,
    },
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

/// Ordered sources to call; empty means `NULL`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PlanDecision {
    pub sources: Vec<SourceId>,
}

impl PlanDecision {
    pub fn null() -> Self {
        Self::default()
    }

    pub fn new(sources: Vec<SourceId>) -> Self {
        Self { sources }
    }

    pub fn persona() -> Self {
        Self::new(vec![SourceId::persona()])
    }

    pub fn both() -> Self {
        Self::new(vec![SourceId::persona(), SourceId::documents()])
    }

    pub fn is_null(&self) -> bool {
        self.sources.is_empty()
    }

    pub fn uses(&self, name: &str) -> bool {
        self.sources.iter().any(|s| s.as_str() == name)
    }

    pub fn class(&self) -> Option<DecisionClass> {
        DecisionClass::of(self)
    }
}

impl fmt::Display for PlanDecision {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.sources.is_empty() {
            return f.write_str("NULL");
        }
        let names: Vec<&str> = self.sources.iter().map(SourceId::as_str).collect();
        f.write_str(&names.join(", "))
    }
}

/// The three decisions possible over the persona/documents registry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum DecisionClass {
    Null,
    Persona,
    Both,
}

impl DecisionClass {
    pub const ALL: [DecisionClass; 3] = [DecisionClass::Null, DecisionClass::Persona, DecisionClass::Both];

    pub fn of(d: &PlanDecision) -> Option<Self> {
        let names: Vec<&str> = d.sources.iter().map(SourceId::as_str).collect();
        match names.as_slice() {
            [] => Some(Self::Null),
            [PERSONA] => Some(Self::Persona),
            [PERSONA, DOCUMENTS] => Some(Self::Both),
            _ => None,
        }
    }

    pub fn decision(self) -> PlanDecision {
        match self {
            Self::Null => PlanDecision::null(),
            Self::Persona => PlanDecision::persona(),
            Self::Both => PlanDecision::both(),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Null => "NULL",
            Self::Persona => "PERSONA",
            Self::Both => "BOTH",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpecialTokens {
    pub source_open: String,
    pub source_close: String,
    pub middle_open: String,
    pub middle_close: String,
    pub null_token: String,
}

impl Default for SpecialTokens {
    fn default() -> Self {
        Self {
            source_open: "[SOURCE]".into(),
            source_close: "[EOS]".into(),
            middle_open: "[MIDDLE]".into(),
            middle_close: "[EOM]".into(),
            null_token: "NULL".into(),
        }
    }
}

impl SpecialTokens {
    pub fn all(&self) -> [&str; 5] {
        [
            &self.source_open,
            &self.source_close,
            &self.middle_open,
            &self.middle_close,
            &self.null_token,
        ]
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        let all = self.all();
        for (i, a) in all.iter().enumerate() {
            if a.chars().count() < 2 || a.contains('\\') {
                return Err(PlannerError::Template(format!(
                    "special token {a:?} must have at least two characters and no backslash"
                )));
            }
            if all[i + 1..].contains(a) {
                return Err(PlannerError::Template(format!("special token {a:?} is repeated")));
            }
        }
        Ok(())
    }

    /// Make `text` free of special tokens: backslashes are doubled, then a
    /// backslash is inserted after the first character of every token.
    /// Distinct inputs stay distinct.
    pub fn escape(&self, text: &str) -> String {
        let mut out = text.replace('\\', "\\\\");
        let mut tokens = self.all();
        tokens.sort_by_key(|t| std::cmp::Reverse(t.len()));
        for tok in tokens {
            if out.contains(tok) {
                let first = tok.chars().next().expect("non-empty token");
                let escaped = format!("{first}\\{}", &tok[first.len_utf8()..]);
                out = out.replace(tok, &escaped);
            }
        }
        out
    }
}

/// `"[SOURCE] A, B [EOS]"`, or `"[SOURCE] NULL [EOS]"` for an empty decision.
pub fn serialize_decision(d: &PlanDecision, toks: &SpecialTokens) -> String {
    let body = if d.is_null() {
        toks.null_token.clone()
    } else {
        d.sources.iter().map(SourceId::as_str).collect::<Vec<_>>().join(", ")
    };
    format!("{} {} {}", toks.source_open, body, toks.source_close)
}

/// Adjustments made while turning planner output into a valid decision.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum NormalizationFlag {
    /// Neither a source name nor the null token was found.
    Unparseable,
    /// A source appeared without one of its dependencies; the whole decision became NULL.
    CollapsedMissingDependency,
    /// All dependencies were present but out of order.
    Reordered,
    /// A source was named more than once.
    Deduplicated,
    /// The null token appeared together with source names; the sources were kept.
    NullWithSources,
    /// A normalization was applied on a registry with more than two sources,
    /// where only the documents-without-persona case has a reference rule.
    ExtendedRule,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParsedDecision {
    pub decision: PlanDecision,
    pub flags: Vec<NormalizationFlag>,
}

fn plan_span<'a>(raw: &'a str, toks: &SpecialTokens) -> &'a str {
    let Some(open) = raw.find(&toks.source_open) else {
        return raw;
    };
    let rest = &raw[open + toks.source_open.len()..];
    match rest.find(&toks.source_close) {
        Some(close) => &rest[..close],
        None => rest,
    }
}

/// Read a decision out of arbitrary planner text.
///
/// Source names and the null token are matched case-insensitively as whole
/// words, inside the first `[SOURCE] .. [EOS]` span if there is one. A source
/// named without its dependencies turns the decision into NULL; a complete
/// set in the wrong order is put in dependency order.
pub fn parse_decision(raw: &str, registry: &SourceRegistry, toks: &SpecialTokens) -> ParsedDecision {
    let span = plan_span(raw, toks);
    let mut flags = Vec::new();
    let mut found: Vec<SourceId> = Vec::new();
    let mut saw_null = false;
    let mut repeated = false;
    for word in span.split(|c: char| !(c.is_ascii_alphanumeric() || c == '_')) {
        if word.is_empty() {
            continue;
        }
        if word.eq_ignore_ascii_case(&toks.null_token) {
            saw_null = true;
        } else if let Some(id) = registry.find_ignore_case(word) {
            if found.contains(id) {
                repeated = true;
            } else {
                found.push(id.clone());
            }
        }
    }
    if repeated {
        flags.push(NormalizationFlag::Deduplicated);
    }
    if found.is_empty() {
        if !saw_null {
            flags.push(NormalizationFlag::Unparseable);
        }
        return ParsedDecision {
            decision: PlanDecision::null(),
            flags,
        };
    }
    if saw_null {
        flags.push(NormalizationFlag::NullWithSources);
    }
    let extended = registry.len() > 2;
    let closed = registry.is_dependency_closed(&found).expect("ids come from the registry");
    if !closed {
        flags.push(NormalizationFlag::CollapsedMissingDependency);
        if extended {
            flags.push(NormalizationFlag::ExtendedRule);
        }
        return ParsedDecision {
            decision: PlanDecision::null(),
            flags,
        };
    }
    if !registry.validate_order(&found).expect("ids come from the registry") {
        found = registry.dependency_order(&found).expect("registry is acyclic");
        flags.push(NormalizationFlag::Reordered);
        if extended {
            flags.push(NormalizationFlag::ExtendedRule);
        }
    }
    ParsedDecision {
        decision: PlanDecision::new(found),
        flags,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PromptMode {
    #[serde(rename = "ZERO_SHOT")]
    ZeroShot,
    #[serde(rename = "IN_CONTEXT")]
    InContext,
}

/// A solved example shown to the planner before the live dialogue.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Demonstration {
    pub context: DialogueContext,
    pub decision: PlanDecision,
    /// Reference response, used by assembling demonstrations.
    #[serde(default)]
    pub response: String,
    /// Evidence lines (`SOURCE: text`), used by assembling demonstrations.
    #[serde(default)]
    pub evidence: Vec<(SourceId, String)>,
}

#[derive(Debug, Clone)]
pub struct PlannerPromptSpec {
    pub mode: PromptMode,
    pub demonstrations: Vec<Demonstration>,
    pub registry: SourceRegistry,
    pub template: String,
    pub tokens: SpecialTokens,
}

impl PlannerPromptSpec {
    pub fn zero_shot(registry: SourceRegistry) -> Self {
        Self {
            mode: PromptMode::ZeroShot,
            demonstrations: Vec::new(),
            registry,
            template: PLANNING_TEMPLATE_EN.to_owned(),
            tokens: SpecialTokens::default(),
        }
    }

    pub fn in_context(registry: SourceRegistry, demonstrations: Vec<Demonstration>) -> Self {
        Self {
            mode: PromptMode::InContext,
            demonstrations,
            ..Self::zero_shot(registry)
        }
    }

    pub fn with_template_file(mut self, path: &Path) -> Result<Self, PlannerError> {
        self.template = std::fs::read_to_string(path)
            .map_err(|e| PlannerError::Template(format!("{}: {e}", path.display())))?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<(), PlannerError> {
        for ph in ["{K_DESC_LIST}", "{DEPENDENCY_DESC}", "{DIALOGUE}"] {
            if !self.template.contains(ph) {
                return Err(PlannerError::Template(format!("planning template lacks {ph}")));
            }
        }
        match self.mode {
            PromptMode::ZeroShot if !self.demonstrations.is_empty() => Err(PlannerError::Precondition(
                "zero-shot planning takes no demonstrations".into(),
            )),
            PromptMode::InContext if self.demonstrations.is_empty() => Err(PlannerError::Precondition(
                "in-context planning needs at least one demonstration".into(),
            )),
            _ => self.tokens.validate(),
        }
    }
}

/// `NAME: description` lines in registration order.
pub fn source_descriptions(registry: &SourceRegistry) -> Result<String, PlannerError> {
    let mut lines = Vec::with_capacity(registry.len());
    for spec in registry.specs() {
        if spec.description.trim().is_empty() {
            return Err(PlannerError::MissingDescription(spec.id.clone()));
        }
        lines.push(format!("{}: {}", spec.id, spec.description.trim()));
    }
    Ok(lines.join("\n"))
}

/// One sentence per dependent source, generated from the registry edges.
pub fn dependency_description(registry: &SourceRegistry) -> String {
    let mut sentences = Vec::new();
    for spec in registry.specs() {
        if spec.depends_on.is_empty() {
            continue;
        }
        let deps: Vec<&str> = spec.depends_on.iter().map(SourceId::as_str).collect();
        sentences.push(format!(
            "The invocation of {} relies on the results from {}.",
            spec.id,
            deps.join(" and ")
        ));
    }
    if sentences.is_empty() {
        return "None of them relies on the results of another.".into();
    }
    sentences.push("Please ensure the correct order of invoking them.".into());
    sentences.join(" ")
}

fn fill_planning(template: &str, descriptions: &str, dependency: &str, transcript: &str) -> String {
    template
        .replace("{K_DESC_LIST}", descriptions)
        .replace("{DEPENDENCY_DESC}", dependency)
        .replace("{DIALOGUE}", transcript)
}

/// Render the planning prompt for `context`. In-context mode prepends one
/// block per demonstration, each a dialogue followed by its serialized decision.
pub fn build_planning_prompt(context: &DialogueContext, spec: &PlannerPromptSpec) -> Result<String, PlannerError> {
    spec.validate()?;
    if !context.has_user_turn() {
        return Err(PlannerError::Precondition(
            "dialogue context needs at least one user turn".into(),
        ));
    }
    let descriptions = source_descriptions(&spec.registry)?;
    let dependency = dependency_description(&spec.registry);
    let live = fill_planning(&spec.template, &descriptions, &dependency, &context.transcript());
    if spec.mode == PromptMode::ZeroShot {
        return Ok(live);
    }
    let mut blocks: Vec<String> = spec
        .demonstrations
        .iter()
        .enumerate()
        .map(|(i, d)| {
            format!(
                "Demonstration {}:\n{}\nOutput: {}",
                i + 1,
                d.context.transcript(),
                serialize_decision(&d.decision, &spec.tokens)
            )
        })
        .collect();
    blocks.push(live);
    Ok(blocks.join("\n\n"))
}

/// Pick demonstrations from training dialogues, cycling through the NULL,
/// PERSONA and BOTH classes. Each class's samples are taken in file order,
/// or in a seeded shuffled order. Classes without samples are skipped.
pub fn select_demonstrations(train: &[DialogueRecord], count: usize, seed: Option<u64>) -> Vec<Demonstration> {
    let mut pools: Vec<Vec<Demonstration>> = vec![Vec::new(); DecisionClass::ALL.len()];
    for record in train {
        for t in record.system_turns() {
            let turn = &record.turns[t];
            let Some(g) = &turn.grounding else { continue };
            let decision = PlanDecision::new(g.sources.clone());
            let Some(class) = decision.class() else { continue };
            let mut evidence = Vec::new();
            if let Some(p) = record.gold_persona(g) {
                evidence.push((SourceId::persona(), p.to_owned()));
            }
            for k in record.gold_knowledge(g) {
                evidence.push((SourceId::documents(), k.to_owned()));
            }
            pools[class as usize].push(Demonstration {
                context: record.context_before(t),
                decision,
                response: turn.text.clone(),
                evidence,
            });
        }
    }
    if let Some(seed) = seed {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for pool in &mut pools {
            pool.shuffle(&mut rng);
        }
    }
    let mut cursors = vec![0usize; pools.len()];
    let mut out = Vec::with_capacity(count);
    while out.len() < count {
        let mut progressed = false;
        for (c, pool) in pools.iter().enumerate() {
            if out.len() == count {
                break;
            }
            if let Some(d) = pool.get(cursors[c]) {
                out.push(d.clone());
                cursors[c] += 1;
                progressed = true;
            }
        }
        if !progressed {
            break;
        }
    }
    out
}

/// Result of one planning call, kept for the audit log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanOutcome {
    pub prompt: String,
    pub raw_output: String,
    pub parsed: ParsedDecision,
}

/// Prompt the backend and parse its answer.
pub fn plan(
    sample_id: &str,
    context: &DialogueContext,
    backend: &dyn GenerationBackend,
    spec: &PlannerPromptSpec,
    params: GenerationParams,
) -> Result<PlanOutcome, PlannerError> {
    let prompt = build_planning_prompt(context, spec)?;
    let raw_output = backend
        .generate(&GenerationRequest::with_params(prompt.clone(), params))
        .map_err(|source| PlannerError::Backend {
            sample_id: sample_id.to_owned(),
            source,
        })?;
    let parsed = parse_decision(&raw_output, &spec.registry, &spec.tokens);
    Ok(PlanOutcome {
        prompt,
        raw_output,
        parsed,
    })
}
