//! Text generation, embedding and entailment-judging backends.
//!
//! Every backend is a shareable handle (`Send + Sync`). The scripted and echo
//! generators and the rule judge are pure, so pipelines built on them are
//! reproducible byte for byte.

mod embedding;
mod generation;
mod judge;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use embedding::{EmbeddingProvider, FixedEmbedder, HashingEmbedder};
pub use generation::{
    EchoBackend, EchoTransform, GenerationBackend, GenerationParams, GenerationRequest, HttpChatBackend,
    HttpCounters, ScriptedBackend,
};
pub use judge::{BackendJudge, ConstantJudge, Judge, JudgeDescriptor, JudgeKind, RuleJudge};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BackendError {
    #[error("request timed out after {attempts} attempt(s)")]
    Timeout { attempts: usize },
    #[error("HTTP status {0}")]
    HttpStatus(u16),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("malformed response: {0}")]
    MalformedResponse(String),
    #[error("no scripted response for prompt starting {0:?}")]
    ReplayMiss(String),
    #[error("embedding provider failure: {0}")]
    ProviderFailure(String),
    #[error("embedding dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("judge failure: {0}")]
    JudgeFailure(String),
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("{path}: {detail}")]
    Io { path: String, detail: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BackendKind {
    #[serde(rename = "HTTP_CHAT")]
    HttpChat,
    #[serde(rename = "SCRIPTED")]
    Scripted,
    #[serde(rename = "ECHO")]
    Echo,
}

/// Configuration-file description of a generation backend.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackendDescriptor {
    pub kind: BackendKind,
    pub endpoint: Option<String>,
    pub model_name: Option<String>,
    /// Name of the environment variable holding the bearer token.
    pub api_key_env: Option<String>,
    pub timeout_ms: u64,
    /// Extra attempts after the first failure.
    pub retries: usize,
    pub backoff_ms: u64,
    pub replay_path: Option<PathBuf>,
    pub echo_transform: EchoTransform,
}

impl Default for BackendDescriptor {
    fn default() -> Self {
        Self {
            kind: BackendKind::Echo,
            endpoint: None,
            model_name: None,
            api_key_env: None,
            timeout_ms: 30_000,
            retries: 2,
            backoff_ms: 250,
            replay_path: None,
            echo_transform: EchoTransform::Identity,
        }
    }
}

impl BackendDescriptor {
    pub fn scripted(path: impl Into<PathBuf>) -> Self {
        Self {
            kind: BackendKind::Scripted,
            replay_path: Some(path.into()),
            ..Self::default()
        }
    }

    pub fn echo(transform: EchoTransform) -> Self {
        Self {
            kind: BackendKind::Echo,
            echo_transform: transform,
            ..Self::default()
        }
    }

    pub fn http(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::HttpChat,
            endpoint: Some(endpoint.into()),
            model_name: Some(model.into()),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        match self.kind {
            BackendKind::HttpChat => {
                if self.endpoint.as_deref().is_none_or(str::is_empty) {
                    return Err(BackendError::Config("HTTP_CHAT requires an endpoint".into()));
                }
                if self.model_name.as_deref().is_none_or(str::is_empty) {
                    return Err(BackendError::Config("HTTP_CHAT requires a model_name".into()));
                }
                if self.timeout_ms == 0 {
                    return Err(BackendError::Config("timeout_ms must be positive".into()));
                }
            }
            BackendKind::Scripted => {
                if self.replay_path.is_none() {
                    return Err(BackendError::Config("SCRIPTED requires a replay_path".into()));
                }
            }
            BackendKind::Echo => {}
        }
        Ok(())
    }

    /// Resolve a relative replay path against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        if let Some(p) = &self.replay_path {
            if p.is_relative() {
                self.replay_path = Some(base.join(p));
            }
        }
    }
}

pub fn build_backend(desc: &BackendDescriptor) -> Result<Arc<dyn GenerationBackend>, BackendError> {
    desc.validate()?;
    Ok(match desc.kind {
        BackendKind::HttpChat => Arc::new(HttpChatBackend::from_descriptor(desc)?),
        BackendKind::Scripted => Arc::new(ScriptedBackend::load(
            desc.replay_path.as_deref().expect("validated"),
        )?),
        BackendKind::Echo => Arc::new(EchoBackend::new(desc.echo_transform.clone())),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_validation() {
        let mut d = BackendDescriptor::http("http://localhost:1", "m");
        assert!(d.validate().is_ok());
        d.model_name = None;
        assert!(matches!(d.validate(), Err(BackendError::Config(_))));
        let d = BackendDescriptor {
            kind: BackendKind::Scripted,
            ..Default::default()
        };
        assert!(d.validate().is_err());
        assert!(BackendDescriptor::default().validate().is_ok());
    }

    #[test]
    fn descriptor_json() {
        let d: BackendDescriptor =
            serde_json::from_str(r#"{"kind":"HTTP_CHAT","endpoint":"http://x","model_name":"m","retries":5}"#)
                .unwrap();
        assert_eq!(d.kind, BackendKind::HttpChat);
        assert_eq!(d.retries, 5);
        assert_eq!(d.timeout_ms, 30_000);
    }

    #[test]
    fn relative_replay_path_resolves() {
        let mut d = BackendDescriptor::scripted("replay.jsonl");
        d.resolve_paths(Path::new("/data"));
        assert_eq!(d.replay_path.unwrap(), PathBuf::from("/data/replay.jsonl"));
    }
}
