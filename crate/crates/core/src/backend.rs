//! Completion backends: a live OpenAI-compatible chat client and
//! deterministic doubles for tests and desk-scale runs.

use std::collections::BTreeMap;
use std::io::BufRead;
use std::sync::{Condvar, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::prompt::RenderedPrompt;

pub const DEFAULT_API_KEY_ENV: &str = "EXTRACT_API_KEY";

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("no scripted reply for {0}")]
    MissingScriptEntry(CallTag),
    #[error("transport failure after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("reply was truncated at the output token limit")]
    Truncated,
    #[error("unexpected response shape: {0}")]
    InvalidResponse(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CallMode {
    OneByOne,
    Reflection,
}

/// Identifies one backend call. Deterministic backends key replies by tag,
/// never by arrival order.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CallTag {
    pub case_id: String,
    pub round: u32,
    pub mode: CallMode,
    /// The queried variable for one-by-one calls.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub variable: Option<String>,
}

impl CallTag {
    pub fn one_by_one(case_id: impl Into<String>, variable: impl Into<String>) -> Self {
        CallTag {
            case_id: case_id.into(),
            round: 0,
            mode: CallMode::OneByOne,
            variable: Some(variable.into()),
        }
    }

    pub fn reflection(case_id: impl Into<String>, round: u32) -> Self {
        CallTag {
            case_id: case_id.into(),
            round,
            mode: CallMode::Reflection,
            variable: None,
        }
    }
}

impl std::fmt::Display for CallTag {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({}, {}, {:?}", self.case_id, self.round, self.mode)?;
        if let Some(v) = &self.variable {
            write!(f, ", {v}")?;
        }
        f.write_str(")")
    }
}

pub trait Backend: Send + Sync {
    fn complete(&self, prompt: &RenderedPrompt, tag: &CallTag) -> Result<String, BackendError>;

    /// Configuration summary for run manifests. Must not contain secrets.
    fn describe(&self) -> serde_json::Value;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    HttpChat,
    Scripted,
    RepairSimulator,
}

fn default_temperature() -> f64 {
    0.0
}
fn default_max_tokens() -> u32 {
    4096
}
fn default_timeout_ms() -> u64 {
    120_000
}
fn default_retries() -> u32 {
    3
}
fn default_concurrency() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    500
}
fn default_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_owned()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default)]
    pub base_url: Option<String>,
    #[serde(default)]
    pub model: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_tokens")]
    pub max_output_tokens: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_backoff_ms")]
    pub retry_backoff_ms: u64,
    #[serde(default = "default_concurrency")]
    pub max_concurrency: usize,
    /// Name of the environment variable holding the API key.
    #[serde(default = "default_key_env")]
    pub api_key_env: String,
    /// Script file for the scripted backend.
    #[serde(default)]
    pub script: Option<std::path::PathBuf>,
    /// Seed for the repair simulator.
    #[serde(default)]
    pub seed: Option<u64>,
    /// Ground-truth file the repair simulator perturbs.
    #[serde(default)]
    pub truths: Option<std::path::PathBuf>,
}

impl BackendConfig {
    pub fn new(kind: BackendKind) -> Self {
        BackendConfig {
            kind,
            base_url: None,
            model: String::new(),
            temperature: default_temperature(),
            max_output_tokens: default_max_tokens(),
            timeout_ms: default_timeout_ms(),
            max_retries: default_retries(),
            retry_backoff_ms: default_backoff_ms(),
            max_concurrency: default_concurrency(),
            api_key_env: default_key_env(),
            script: None,
            seed: None,
            truths: None,
        }
    }

    pub fn http_chat(base_url: impl Into<String>, model: impl Into<String>) -> Self {
        BackendConfig {
            base_url: Some(base_url.into()),
            model: model.into(),
            ..Self::new(BackendKind::HttpChat)
        }
    }

    pub fn validate(&self) -> Result<(), BackendError> {
        if self.temperature.is_nan() || self.temperature < 0.0 {
            return Err(BackendError::Config("temperature must be >= 0".into()));
        }
        if self.max_concurrency == 0 {
            return Err(BackendError::Config("max_concurrency must be >= 1".into()));
        }
        if self.kind == BackendKind::HttpChat && self.base_url.is_none() {
            return Err(BackendError::Config("http_chat needs base_url".into()));
        }
        Ok(())
    }

    /// The config as JSON. Only the key's variable name is recorded.
    pub fn redacted(&self) -> serde_json::Value {
        serde_json::to_value(self).expect("config serializes")
    }
}

/// Replies looked up by call tag.
#[derive(Debug, Clone, Default)]
pub struct ScriptedBackend {
    replies: BTreeMap<CallTag, String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct ScriptLine {
    #[serde(flatten)]
    tag: CallTag,
    reply: String,
}

impl ScriptedBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, tag: CallTag, reply: impl Into<String>) {
        self.replies.insert(tag, reply.into());
    }

    pub fn with(mut self, tag: CallTag, reply: impl Into<String>) -> Self {
        self.insert(tag, reply);
        self
    }

    pub fn len(&self) -> usize {
        self.replies.len()
    }

    pub fn is_empty(&self) -> bool {
        self.replies.is_empty()
    }

    /// Reads a JSON-lines script of `{case_id, round, mode, variable?, reply}`.
    pub fn read_jsonl(reader: impl BufRead) -> Result<Self, BackendError> {
        let mut s = ScriptedBackend::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| BackendError::Config(e.to_string()))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ScriptLine = serde_json::from_str(&line)
                .map_err(|e| BackendError::Config(format!("script line {}: {e}", i + 1)))?;
            s.insert(entry.tag, entry.reply);
        }
        Ok(s)
    }

    pub fn to_jsonl_string(&self) -> String {
        let mut out = String::new();
        for (tag, reply) in &self.replies {
            let line = ScriptLine {
                tag: tag.clone(),
                reply: reply.clone(),
            };
            out.push_str(&serde_json::to_string(&line).expect("script serializes"));
            out.push('\n');
        }
        out
    }
}

impl Backend for ScriptedBackend {
    fn complete(&self, _prompt: &RenderedPrompt, tag: &CallTag) -> Result<String, BackendError> {
        self.replies
            .get(tag)
            .cloned()
            .ok_or_else(|| BackendError::MissingScriptEntry(tag.clone()))
    }

    fn describe(&self) -> serde_json::Value {
        json!({"kind": "scripted", "entries": self.replies.len()})
    }
}

/// Counting semaphore bounding in-flight requests.
#[derive(Debug, Default)]
struct Gate {
    state: Mutex<(usize, usize)>, // (in flight, peak)
    freed: Condvar,
}

impl Gate {
    fn enter(&self, limit: usize) -> GateGuard<'_> {
        let mut st = self.state.lock().expect("gate poisoned");
        while st.0 >= limit {
            st = self.freed.wait(st).expect("gate poisoned");
        }
        st.0 += 1;
        st.1 = st.1.max(st.0);
        GateGuard(self)
    }
}

struct GateGuard<'a>(&'a Gate);

impl Drop for GateGuard<'_> {
    fn drop(&mut self) {
        let mut st = self.0.state.lock().expect("gate poisoned");
        st.0 -= 1;
        self.0.freed.notify_one();
    }
}

/// Single-turn chat completions over HTTP.
pub struct HttpChatBackend {
    config: BackendConfig,
    endpoint: String,
    agent: ureq::Agent,
    api_key: Option<String>,
    gate: Gate,
}

impl std::fmt::Debug for HttpChatBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpChatBackend")
            .field("endpoint", &self.endpoint)
            .field("model", &self.config.model)
            .finish_non_exhaustive()
    }
}

enum Attempt {
    Retry(String),
    Fail(BackendError),
}

impl HttpChatBackend {
    pub fn new(config: BackendConfig) -> Result<Self, BackendError> {
        config.validate()?;
        let base = config
            .base_url
            .as_deref()
            .ok_or_else(|| BackendError::Config("http_chat needs base_url".into()))?
            .trim_end_matches('/');
        let endpoint = if base.ends_with("/chat/completions") {
            base.to_owned()
        } else {
            format!("{base}/chat/completions")
        };
        let agent = ureq::AgentBuilder::new()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build();
        let api_key = std::env::var(&config.api_key_env).ok().filter(|k| !k.is_empty());
        Ok(HttpChatBackend {
            config,
            endpoint,
            agent,
            api_key,
            gate: Gate::default(),
        })
    }

    /// Highest number of requests observed in flight at once.
    pub fn peak_in_flight(&self) -> usize {
        self.gate.state.lock().expect("gate poisoned").1
    }

    fn request_body(&self, prompt: &RenderedPrompt) -> serde_json::Value {
        json!({
            "model": self.config.model,
            "temperature": self.config.temperature,
            "max_tokens": self.config.max_output_tokens,
            "messages": [{"role": "user", "content": prompt.text}],
        })
    }

    fn attempt(&self, body: &serde_json::Value) -> Result<String, Attempt> {
        let mut req = self
            .agent
            .post(&self.endpoint)
            .set("Content-Type", "application/json");
        if let Some(key) = &self.api_key {
            req = req.set("Authorization", &format!("Bearer {key}"));
        }
        let resp = match req.send_json(body) {
            Ok(r) => r,
            Err(ureq::Error::Status(code, r)) => {
                let text = r.into_string().unwrap_or_default();
                return Err(if code == 429 || code >= 500 {
                    Attempt::Retry(format!("HTTP {code}"))
                } else {
                    Attempt::Fail(BackendError::Http { status: code, body: text })
                });
            }
            Err(ureq::Error::Transport(t)) => return Err(Attempt::Retry(t.to_string())),
        };
        let value: serde_json::Value = resp
            .into_json()
            .map_err(|e| Attempt::Retry(format!("reading body: {e}")))?;
        parse_chat_response(&value).map_err(Attempt::Fail)
    }
}

/// Content of the first choice; a `length` finish reason is an error.
pub fn parse_chat_response(value: &serde_json::Value) -> Result<String, BackendError> {
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| BackendError::InvalidResponse("no choices".into()))?;
    if choice.get("finish_reason").and_then(|f| f.as_str()) == Some("length") {
        return Err(BackendError::Truncated);
    }
    choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .map(str::to_owned)
        .ok_or_else(|| BackendError::InvalidResponse("first choice has no message content".into()))
}

impl Backend for HttpChatBackend {
    fn complete(&self, prompt: &RenderedPrompt, tag: &CallTag) -> Result<String, BackendError> {
        let body = self.request_body(prompt);
        let attempts = self.config.max_retries + 1;
        let mut last = String::new();
        for i in 0..attempts {
            if i > 0 {
                std::thread::sleep(Duration::from_millis(
                    self.config.retry_backoff_ms.saturating_mul(1 << (i - 1).min(6)),
                ));
            }
            let _slot = self.gate.enter(self.config.max_concurrency);
            match self.attempt(&body) {
                Ok(text) => return Ok(text),
                Err(Attempt::Fail(e)) => return Err(e),
                Err(Attempt::Retry(msg)) => {
                    tracing::debug!(%tag, attempt = i + 1, error = %msg, "chat request failed");
                    last = msg;
                }
            }
        }
        Err(BackendError::Transport {
            attempts,
            message: last,
        })
    }

    fn describe(&self) -> serde_json::Value {
        self.config.redacted()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::prompt::PromptKind;

    fn prompt() -> RenderedPrompt {
        RenderedPrompt {
            kind: PromptKind::Reflection,
            text: "hello".into(),
            slots: BTreeMap::new(),
        }
    }

    #[test]
    fn scripted_lookup() {
        let b = ScriptedBackend::new().with(CallTag::reflection("C1", 1), "{\"a\":1}");
        assert_eq!(b.complete(&prompt(), &CallTag::reflection("C1", 1)).unwrap(), "{\"a\":1}");
        assert!(matches!(
            b.complete(&prompt(), &CallTag::reflection("C1", 2)),
            Err(BackendError::MissingScriptEntry(_))
        ));
    }

    #[test]
    fn script_file_round_trip() {
        let b = ScriptedBackend::new()
            .with(CallTag::one_by_one("C1", "Tumor Site"), "x")
            .with(CallTag::reflection("C1", 3), "y");
        let text = b.to_jsonl_string();
        assert!(text.contains("\"mode\":\"one_by_one\""));
        let back = ScriptedBackend::read_jsonl(text.as_bytes()).unwrap();
        assert_eq!(back.replies, b.replies);
    }

    #[test]
    fn chat_response_parsing() {
        let ok = json!({"choices":[{"message":{"role":"assistant","content":"hi"},"finish_reason":"stop"}]});
        assert_eq!(parse_chat_response(&ok).unwrap(), "hi");
        let cut = json!({"choices":[{"message":{"content":"h"},"finish_reason":"length"}]});
        assert!(matches!(parse_chat_response(&cut), Err(BackendError::Truncated)));
        assert!(matches!(
            parse_chat_response(&json!({"choices":[]})),
            Err(BackendError::InvalidResponse(_))
        ));
    }

    #[test]
    fn config_defaults_and_redaction() {
        let c: BackendConfig =
            serde_json::from_str(r#"{"kind":"http_chat","base_url":"http://x","model":"m"}"#).unwrap();
        assert_eq!(c.temperature, 0.0);
        assert_eq!(c.api_key_env, DEFAULT_API_KEY_ENV);
        assert!(c.validate().is_ok());
        let red = c.redacted().to_string();
        assert!(red.contains("EXTRACT_API_KEY"));
        let bad = BackendConfig {
            max_concurrency: 0,
            ..c
        };
        assert!(bad.validate().is_err());
    }
}
