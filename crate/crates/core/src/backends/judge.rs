use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{build_backend, BackendDescriptor, BackendError, GenerationBackend, GenerationRequest};
use crate::text::{content_tokens, StopWords, Tokenizer, WhitespaceCjkTokenizer};

/// Decides whether a response entails a grounding sentence.
pub trait Judge: Send + Sync {
    fn entails(&self, response: &str, grounding: &str) -> Result<bool, BackendError>;
}

fn require_text(response: &str, grounding: &str) -> Result<(), BackendError> {
    if response.trim().is_empty() || grounding.trim().is_empty() {
        return Err(BackendError::JudgeFailure("response and grounding must be non-empty".into()));
    }
    Ok(())
}

/// Lexical stand-in for an NLI model: entails when at least `threshold` of
/// the grounding's content tokens occur in the response.
///
/// This is not a faithful entailment model; it exists so the consistency
/// metrics can be computed and tested deterministically.
pub struct RuleJudge {
    tokenizer: Arc<dyn Tokenizer>,
    stopwords: StopWords,
    threshold: f64,
}

impl RuleJudge {
    pub const DEFAULT_THRESHOLD: f64 = 0.5;

    pub fn new(tokenizer: Arc<dyn Tokenizer>, stopwords: StopWords, threshold: f64) -> Self {
        Self {
            tokenizer,
            stopwords,
            threshold,
        }
    }

    /// `(matched, total)` content tokens of `grounding` found in `response`.
    pub fn overlap(&self, response: &str, grounding: &str) -> (usize, usize) {
        let have: HashSet<&str> = self.tokenizer.tokenize(response).into_iter().collect();
        let want = content_tokens(self.tokenizer.as_ref(), &self.stopwords, grounding);
        let matched = want.iter().filter(|t| have.contains(*t)).count();
        (matched, want.len())
    }
}

impl Default for RuleJudge {
    fn default() -> Self {
        Self::new(Arc::new(WhitespaceCjkTokenizer), StopWords::empty(), Self::DEFAULT_THRESHOLD)
    }
}

impl Judge for RuleJudge {
    fn entails(&self, response: &str, grounding: &str) -> Result<bool, BackendError> {
        require_text(response, grounding)?;
        let (matched, total) = self.overlap(response, grounding);
        if total == 0 {
            return Ok(false);
        }
        Ok(matched as f64 >= self.threshold * total as f64)
    }
}

/// Always returns the same verdict.
#[derive(Debug, Clone, Copy)]
pub struct ConstantJudge(pub bool);

impl Judge for ConstantJudge {
    fn entails(&self, response: &str, grounding: &str) -> Result<bool, BackendError> {
        require_text(response, grounding)?;
        Ok(self.0)
    }
}

/// Asks a generation backend for a yes/no entailment verdict.
pub struct BackendJudge {
    backend: Arc<dyn GenerationBackend>,
}

impl BackendJudge {
    pub fn new(backend: Arc<dyn GenerationBackend>) -> Self {
        Self { backend }
    }

    pub fn prompt(response: &str, grounding: &str) -> String {
        format!(
            "Premise: {response}\nHypothesis: {grounding}\nDoes the premise entail the hypothesis? Answer yes or no."
        )
    }
}

impl Judge for BackendJudge {
    fn entails(&self, response: &str, grounding: &str) -> Result<bool, BackendError> {
        require_text(response, grounding)?;
        let raw = self
            .backend
            .generate(&GenerationRequest::new(Self::prompt(response, grounding)))
            .map_err(|e| BackendError::JudgeFailure(e.to_string()))?;
        let word = raw
            .trim()
            .split(|c: char| !c.is_alphanumeric())
            .next()
            .unwrap_or("")
            .to_ascii_lowercase();
        match word.as_str() {
            "yes" | "entailment" | "true" => Ok(true),
            "no" | "contradiction" | "neutral" | "false" => Ok(false),
            _ => Err(BackendError::JudgeFailure(format!("unrecognized verdict {raw:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum JudgeKind {
    Rule,
    Constant,
    Backend,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JudgeDescriptor {
    pub kind: JudgeKind,
    pub threshold: f64,
    pub stopwords_path: Option<PathBuf>,
    pub constant: bool,
    pub backend: Option<BackendDescriptor>,
}

impl Default for JudgeDescriptor {
    fn default() -> Self {
        Self {
            kind: JudgeKind::Rule,
            threshold: RuleJudge::DEFAULT_THRESHOLD,
            stopwords_path: None,
            constant: true,
            backend: None,
        }
    }
}

impl JudgeDescriptor {
    pub fn constant(verdict: bool) -> Self {
        Self {
            kind: JudgeKind::Constant,
            constant: verdict,
            ..Self::default()
        }
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &self.stopwords_path {
            if p.is_relative() {
                self.stopwords_path = Some(base.join(p));
            }
        }
        if let Some(b) = &mut self.backend {
            b.resolve_paths(base);
        }
    }

    pub fn build(&self) -> Result<Arc<dyn Judge>, BackendError> {
        Ok(match self.kind {
            JudgeKind::Rule => {
                if !(0.0..=1.0).contains(&self.threshold) {
                    return Err(BackendError::Config(format!(
                        "judge threshold {} must lie in [0, 1]",
                        self.threshold
                    )));
                }
                let stopwords = match &self.stopwords_path {
                    Some(p) => StopWords::load(p).map_err(|e| BackendError::Io {
                        path: p.display().to_string(),
                        detail: e.to_string(),
                    })?,
                    None => StopWords::empty(),
                };
                Arc::new(RuleJudge::new(Arc::new(WhitespaceCjkTokenizer), stopwords, self.threshold))
            }
            JudgeKind::Constant => Arc::new(ConstantJudge(self.constant)),
            JudgeKind::Backend => {
                let desc = self
                    .backend
                    .as_ref()
                    .ok_or_else(|| BackendError::Config("BACKEND judge requires a backend".into()))?;
                Arc::new(BackendJudge::new(build_backend(desc)?))
            }
        })
    }
}
