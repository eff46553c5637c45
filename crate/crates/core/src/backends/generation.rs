use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::thread;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{BackendDescriptor, BackendError};

/// Decoding parameters passed through to the generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenerationParams {
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
}

impl Default for GenerationParams {
    fn default() -> Self {
        Self {
            temperature: 0.1,
            top_p: 0.1,
            max_tokens: 256,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub prompt: String,
    pub temperature: f64,
    pub top_p: f64,
    pub max_tokens: usize,
}

impl GenerationRequest {
    pub fn new(prompt: impl Into<String>) -> Self {
        Self::with_params(prompt, GenerationParams::default())
    }

    pub fn with_params(prompt: impl Into<String>, p: GenerationParams) -> Self {
        Self {
            prompt: prompt.into(),
            temperature: p.temperature,
            top_p: p.top_p,
            max_tokens: p.max_tokens,
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature {} must be >= 0",
                self.temperature
            )));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(BackendError::InvalidRequest(format!("top_p {} must lie in (0, 1]", self.top_p)));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }
}

pub trait GenerationBackend: Send + Sync {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError>;

    /// Short label for audit records.
    fn name(&self) -> &str;
}

fn excerpt(s: &str) -> String {
    s.chars().take(60).collect()
}

/// Attempt and success counts of an HTTP backend.
#[derive(Debug, Default)]
pub struct HttpCounters {
    pub attempts: AtomicUsize,
    pub successes: AtomicUsize,
}

/// OpenAI-compatible `POST {endpoint}/chat/completions` client.
pub struct HttpChatBackend {
    url: String,
    model: String,
    api_key: Option<String>,
    retries: usize,
    backoff: Duration,
    agent: ureq::Agent,
    counters: HttpCounters,
}

enum Attempt {
    Done(String),
    Retry(BackendError),
    Fail(BackendError),
}

impl HttpChatBackend {
    pub fn new(
        endpoint: &str,
        model: &str,
        api_key: Option<String>,
        timeout: Duration,
        retries: usize,
        backoff: Duration,
    ) -> Self {
        let agent: ureq::Agent = ureq::Agent::config_builder()
            .timeout_global(Some(timeout))
            .http_status_as_error(false)
            .build()
            .into();
        Self {
            url: format!("{}/chat/completions", endpoint.trim_end_matches('/')),
            model: model.to_owned(),
            api_key,
            retries,
            backoff,
            agent,
            counters: HttpCounters::default(),
        }
    }

    pub fn from_descriptor(d: &BackendDescriptor) -> Result<Self, BackendError> {
        d.validate()?;
        let api_key = match &d.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!("environment variable {var} is not set"))
            })?),
            None => None,
        };
        Ok(Self::new(
            d.endpoint.as_deref().expect("validated"),
            d.model_name.as_deref().expect("validated"),
            api_key,
            Duration::from_millis(d.timeout_ms),
            d.retries,
            Duration::from_millis(d.backoff_ms),
        ))
    }

    pub fn counters(&self) -> &HttpCounters {
        &self.counters
    }

    pub fn body(&self, req: &GenerationRequest) -> Value {
        json!({
            "model": self.model,
            "messages": [{"role": "user", "content": req.prompt}],
            "temperature": req.temperature,
            "top_p": req.top_p,
            "max_tokens": req.max_tokens,
        })
    }

    fn attempt(&self, body: &Value) -> Attempt {
        self.counters.attempts.fetch_add(1, Ordering::SeqCst);
        let mut call = self.agent.post(&self.url).header("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            call = call.header("Authorization", &format!("Bearer {key}"));
        }
        let mut resp = match call.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(BackendError::Timeout { attempts: 0 }),
            Err(e) => return Attempt::Retry(BackendError::Transport(e.to_string())),
        };
        let status = resp.status().as_u16();
        if status == 429 || status >= 500 {
            return Attempt::Retry(BackendError::HttpStatus(status));
        }
        if !(200..300).contains(&status) {
            return Attempt::Fail(BackendError::HttpStatus(status));
        }
        let value: Value = match resp.body_mut().read_json() {
            Ok(v) => v,
            Err(ureq::Error::Timeout(_)) => return Attempt::Retry(BackendError::Timeout { attempts: 0 }),
            Err(e) => return Attempt::Fail(BackendError::MalformedResponse(e.to_string())),
        };
        match value.pointer("/choices/0/message/content").and_then(Value::as_str) {
            Some(text) => Attempt::Done(text.to_owned()),
            None => Attempt::Fail(BackendError::MalformedResponse(
                "missing choices[0].message.content".into(),
            )),
        }
    }
}

impl GenerationBackend for HttpChatBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        req.validate()?;
        let body = self.body(req);
        let mut last = BackendError::Transport("no attempt made".into());
        for attempt in 0..=self.retries {
            if attempt > 0 {
                thread::sleep(self.backoff * 2u32.saturating_pow(attempt as u32 - 1));
            }
            match self.attempt(&body) {
                Attempt::Done(text) => {
                    self.counters.successes.fetch_add(1, Ordering::SeqCst);
                    return Ok(text);
                }
                Attempt::Fail(e) => return Err(e),
                Attempt::Retry(e) => last = e,
            }
        }
        Err(match last {
            BackendError::Timeout { .. } => BackendError::Timeout {
                attempts: self.retries + 1,
            },
            other => other,
        })
    }

    fn name(&self) -> &str {
        "HTTP_CHAT"
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ReplayEntry {
    prompt_key: String,
    response: String,
}

/// Replays recorded responses. A prompt matches a key exactly, or else the
/// longest key that is a prefix of it. Anything else is a `ReplayMiss`.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    table: HashMap<String, String>,
    /// Keys sorted by descending length for prefix lookup.
    by_length: Vec<String>,
}

impl ScriptedBackend {
    pub fn new<I, K, V>(pairs: I) -> Result<Self, BackendError>
    where
        I: IntoIterator<Item = (K, V)>,
        K: Into<String>,
        V: Into<String>,
    {
        let mut table = HashMap::new();
        for (k, v) in pairs {
            let k = k.into();
            if k.is_empty() {
                return Err(BackendError::Config("replay prompt_key must be non-empty".into()));
            }
            if table.insert(k.clone(), v.into()).is_some() {
                return Err(BackendError::Config(format!("duplicate replay prompt_key {:?}", excerpt(&k))));
            }
        }
        let mut by_length: Vec<String> = table.keys().cloned().collect();
        by_length.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
        Ok(Self { table, by_length })
    }

    pub fn load(path: &Path) -> Result<Self, BackendError> {
        let io = |e: std::io::Error| BackendError::Io {
            path: path.display().to_string(),
            detail: e.to_string(),
        };
        let reader = BufReader::new(File::open(path).map_err(io)?);
        let mut pairs = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(io)?;
            if line.trim().is_empty() {
                continue;
            }
            let e: ReplayEntry = serde_json::from_str(&line).map_err(|e| BackendError::Io {
                path: path.display().to_string(),
                detail: format!("line {}: {e}", i + 1),
            })?;
            pairs.push((e.prompt_key, e.response));
        }
        Self::new(pairs)
    }

    pub fn len(&self) -> usize {
        self.table.len()
    }

    pub fn is_empty(&self) -> bool {
        self.table.is_empty()
    }

    pub fn lookup(&self, prompt: &str) -> Option<&str> {
        if let Some(r) = self.table.get(prompt) {
            return Some(r);
        }
        self.by_length
            .iter()
            .find(|k| prompt.starts_with(k.as_str()))
            .map(|k| self.table[k].as_str())
    }
}

impl GenerationBackend for ScriptedBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        self.lookup(&req.prompt)
            .map(str::to_owned)
            .ok_or_else(|| BackendError::ReplayMiss(excerpt(&req.prompt)))
    }

    fn name(&self) -> &str {
        "SCRIPTED"
    }
}

/// What an echo backend returns for a prompt.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum EchoTransform {
    #[default]
    Identity,
    /// Last non-empty line.
    LastLine,
    /// Text between the last `[MIDDLE]` and the following `[EOM]`.
    Middle,
    /// First `"; "`-separated item of `Middle`.
    FirstEvidence,
    Uppercase,
}

#[derive(Debug, Clone, Default)]
pub struct EchoBackend {
    transform: EchoTransform,
}

impl EchoBackend {
    pub fn new(transform: EchoTransform) -> Self {
        Self { transform }
    }

    pub fn apply(&self, prompt: &str) -> String {
        fn middle(p: &str) -> &str {
            match p.rfind("[MIDDLE]") {
                Some(start) => {
                    let rest = &p[start + "[MIDDLE]".len()..];
                    rest[..rest.find("[EOM]").unwrap_or(rest.len())].trim()
                }
                None => p.trim(),
            }
        }
        match self.transform {
            EchoTransform::Identity => prompt.to_owned(),
            EchoTransform::LastLine => prompt.lines().rev().find(|l| !l.trim().is_empty()).unwrap_or("").to_owned(),
            EchoTransform::Middle => middle(prompt).to_owned(),
            EchoTransform::FirstEvidence => middle(prompt).split("; ").next().unwrap_or("").to_owned(),
            EchoTransform::Uppercase => prompt.to_uppercase(),
        }
    }
}

impl GenerationBackend for EchoBackend {
    fn generate(&self, req: &GenerationRequest) -> Result<String, BackendError> {
        Ok(self.apply(&req.prompt))
    }

    fn name(&self) -> &str {
        "ECHO"
    }
}
