//! Chat-completion calls with live, record and strict-replay transports.
//!
//! Every request is keyed by the SHA-256 of its canonical JSON form (object
//! keys sorted, content verbatim). The cache is a JSONL file of
//! `{key, request, response, recorded_at}` records, appended in record mode
//! and loaded into memory for replay.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::agents::{parse_tool_invocation, ToolInvocation};
use crate::model::{sha256_hex, ToolSchema};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
    /// Images attached to a user turn, as URLs or `data:` URIs.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub image_urls: Vec<String>,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self { role: Role::System, content: content.into(), image_urls: Vec::new() }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self { role: Role::User, content: content.into(), image_urls: Vec::new() }
    }

    pub fn assistant(content: impl Into<String>) -> Self {
        Self { role: Role::Assistant, content: content.into(), image_urls: Vec::new() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model_id: String,
    pub messages: Vec<ChatMessage>,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_tokens: Option<u32>,
    /// Tools offered to the model. When present, the reply is scanned for a
    /// `tool_call` block.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_schemas: Option<Vec<ToolSchema>>,
}

impl ChatRequest {
    pub fn new(model_id: impl Into<String>, messages: Vec<ChatMessage>) -> Self {
        Self { model_id: model_id.into(), messages, temperature: 0.0, max_tokens: None, tool_schemas: None }
    }

    fn check(&self) -> Result<(), GatewayError> {
        if self.messages.is_empty() {
            return Err(GatewayError::InvalidRequest("request has no messages".into()));
        }
        if !(self.temperature >= 0.0) {
            return Err(GatewayError::InvalidRequest(format!("temperature {} is negative", self.temperature)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    ToolCall,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tool_invocation: Option<ToolInvocation>,
    pub finish_reason: FinishReason,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Live,
    Record,
    ReplayStrict,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransportMode {
    pub mode: Mode,
    #[serde(default)]
    pub cache_path: Option<PathBuf>,
    /// Base URL; `/chat/completions` is appended.
    #[serde(default)]
    pub endpoint: Option<String>,
    /// Name of the environment variable holding the bearer token.
    #[serde(default)]
    pub api_key_env: Option<String>,
}

impl Default for TransportMode {
    fn default() -> Self {
        Self { mode: Mode::ReplayStrict, cache_path: None, endpoint: None, api_key_env: None }
    }
}

impl TransportMode {
    pub fn check(&self) -> Result<(), GatewayError> {
        let needs_cache = matches!(self.mode, Mode::Record | Mode::ReplayStrict);
        let needs_endpoint = matches!(self.mode, Mode::Live | Mode::Record);
        if needs_cache && self.cache_path.is_none() {
            return Err(GatewayError::Config(format!("{:?} mode needs a cache_path", self.mode)));
        }
        if needs_endpoint && self.endpoint.is_none() {
            return Err(GatewayError::Config(format!("{:?} mode needs an endpoint", self.mode)));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum GatewayError {
    #[error("HTTP {status}: {body}")]
    Http { status: u16, body: String },
    #[error("transport failure: {0}")]
    Transport(String),
    #[error("no recorded response for request {cache_key}")]
    CacheMiss { cache_key: String },
    #[error("environment variable {var} is not set")]
    AuthMissing { var: String },
    #[error("cache {path}:{line}: {reason}")]
    CacheCorrupt { path: String, line: usize, reason: String },
    #[error("cache I/O: {0}")]
    CacheIo(#[from] std::io::Error),
    #[error("transport configuration: {0}")]
    Config(String),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// Deterministic digest of the canonical request.
pub fn cache_key(request: &ChatRequest) -> String {
    // serde_json's default map is ordered by key, so this is canonical.
    let value = serde_json::to_value(request).expect("requests always serialize");
    sha256_hex(canonical_json(&value).as_bytes())
}

fn canonical_json(value: &Value) -> String {
    match value {
        Value::Object(map) => {
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort();
            let body: Vec<String> = keys
                .into_iter()
                .map(|k| format!("{}:{}", Value::String(k.clone()), canonical_json(&map[k])))
                .collect();
            format!("{{{}}}", body.join(","))
        }
        Value::Array(xs) => format!("[{}]", xs.iter().map(canonical_json).collect::<Vec<_>>().join(",")),
        other => other.to_string(),
    }
}

/// What an upstream model returned, before tool-call parsing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub content: String,
    pub finish_reason: String,
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, request: &ChatRequest) -> Result<Completion, GatewayError>;
}

/// OpenAI-compatible `POST {endpoint}/chat/completions`. Proxy variables are
/// honored by the HTTP client.
pub struct HttpBackend {
    url: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(endpoint: &str, api_key_env: Option<&str>) -> Result<Self, GatewayError> {
        let api_key = match api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| GatewayError::AuthMissing { var: var.into() })?),
            None => None,
        };
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(300))
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self { url: format!("{}/chat/completions", endpoint.trim_end_matches('/')), api_key, client })
    }

    fn wire_body(request: &ChatRequest) -> Value {
        let messages: Vec<Value> = request
            .messages
            .iter()
            .map(|m| {
                let content = if m.image_urls.is_empty() {
                    Value::String(m.content.clone())
                } else {
                    let mut parts = vec![json!({"type": "text", "text": m.content})];
                    parts.extend(m.image_urls.iter().map(|u| json!({"type": "image_url", "image_url": {"url": u}})));
                    Value::Array(parts)
                };
                json!({"role": m.role, "content": content})
            })
            .collect();
        let mut body = json!({
            "model": request.model_id,
            "messages": messages,
            "temperature": request.temperature,
        });
        if let Some(n) = request.max_tokens {
            body["max_tokens"] = json!(n);
        }
        body
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        let mut req = self.client.post(&self.url).json(&Self::wire_body(request));
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            return Err(GatewayError::Http { status: status.as_u16(), body });
        }
        let v: Value = serde_json::from_str(&body)
            .map_err(|e| GatewayError::Transport(format!("response is not JSON: {e}")))?;
        let choice = &v["choices"][0];
        let content = match &choice["message"]["content"] {
            Value::String(s) => s.clone(),
            Value::Null => String::new(),
            other => other.to_string(),
        };
        let finish_reason = choice["finish_reason"].as_str().unwrap_or("stop").to_string();
        Ok(Completion { content, finish_reason })
    }
}

impl<F> ChatBackend for F
where
    F: Fn(&ChatRequest) -> Result<Completion, GatewayError> + Send + Sync,
{
    fn send(&self, request: &ChatRequest) -> Result<Completion, GatewayError> {
        self(request)
    }
}

#[derive(Serialize, Deserialize)]
struct CacheRecord {
    key: String,
    request: ChatRequest,
    response: ChatResponse,
    recorded_at: String,
}

/// The single entry point for model calls. Safe to share between threads.
pub struct Gateway {
    mode: Mode,
    backend: Option<Box<dyn ChatBackend>>,
    cache: RwLock<HashMap<String, ChatResponse>>,
    cache_path: Option<PathBuf>,
    writer: Mutex<Option<File>>,
    upstream_calls: AtomicU64,
}

impl std::fmt::Debug for Gateway {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Gateway")
            .field("mode", &self.mode)
            .field("cache_path", &self.cache_path)
            .finish_non_exhaustive()
    }
}

impl Gateway {
    /// Build from a transport description. Replay never constructs an HTTP
    /// client, so no endpoint is ever contacted.
    pub fn new(transport: &TransportMode) -> Result<Self, GatewayError> {
        transport.check()?;
        let backend: Option<Box<dyn ChatBackend>> = match transport.mode {
            Mode::ReplayStrict => None,
            Mode::Live | Mode::Record => Some(Box::new(HttpBackend::new(
                transport.endpoint.as_deref().unwrap_or_default(),
                transport.api_key_env.as_deref(),
            )?)),
        };
        Self::assemble(transport.mode, transport.cache_path.as_deref(), backend)
    }

    /// Use a caller-supplied backend (tests, embedding).
    pub fn with_backend(
        mode: Mode,
        cache_path: Option<&Path>,
        backend: impl ChatBackend + 'static,
    ) -> Result<Self, GatewayError> {
        Self::assemble(mode, cache_path, Some(Box::new(backend)))
    }

    fn assemble(mode: Mode, cache_path: Option<&Path>, backend: Option<Box<dyn ChatBackend>>) -> Result<Self, GatewayError> {
        if mode != Mode::Live && cache_path.is_none() {
            return Err(GatewayError::Config(format!("{mode:?} mode needs a cache_path")));
        }
        let cache = match (mode, cache_path) {
            (Mode::Live, _) | (_, None) => HashMap::new(),
            (Mode::Record, Some(p)) if !p.exists() => HashMap::new(),
            (_, Some(p)) => load_cache(p)?,
        };
        let writer = match (mode, cache_path) {
            (Mode::Record, Some(p)) => {
                if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
                    std::fs::create_dir_all(dir)?;
                }
                Some(OpenOptions::new().create(true).append(true).open(p)?)
            }
            _ => None,
        };
        Ok(Self {
            mode,
            backend,
            cache: RwLock::new(cache),
            cache_path: cache_path.map(Path::to_path_buf),
            writer: Mutex::new(writer),
            upstream_calls: AtomicU64::new(0),
        })
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    /// Number of requests sent to the backend by this gateway.
    pub fn upstream_calls(&self) -> u64 {
        self.upstream_calls.load(Ordering::SeqCst)
    }

    pub fn complete(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        request.check()?;
        let key = cache_key(request);
        if self.mode != Mode::Live {
            if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
                return Ok(hit.clone());
            }
        }
        if self.mode == Mode::ReplayStrict {
            return Err(GatewayError::CacheMiss { cache_key: key });
        }
        let response = self.call_upstream(request)?;
        if self.mode == Mode::Record {
            let mut writer = self.writer.lock().expect("writer lock");
            // A concurrent caller may have recorded the same key meanwhile.
            if let Some(hit) = self.cache.read().expect("cache lock").get(&key) {
                return Ok(hit.clone());
            }
            let record = CacheRecord {
                key: key.clone(),
                request: request.clone(),
                response: response.clone(),
                recorded_at: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Secs, true),
            };
            if let Some(file) = writer.as_mut() {
                let mut line = serde_json::to_string(&record).expect("records serialize");
                line.push('\n');
                file.write_all(line.as_bytes())?;
                file.flush()?;
            }
            self.cache.write().expect("cache lock").insert(key, response.clone());
        }
        Ok(response)
    }

    fn call_upstream(&self, request: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        let backend = self
            .backend
            .as_ref()
            .ok_or_else(|| GatewayError::Config("no backend configured".into()))?;
        self.upstream_calls.fetch_add(1, Ordering::SeqCst);
        let completion = backend.send(request)?;
        Ok(to_response(request, completion))
    }
}

fn to_response(request: &ChatRequest, completion: Completion) -> ChatResponse {
    let tool_invocation = match &request.tool_schemas {
        Some(_) => parse_tool_invocation(&completion.content),
        None => None,
    };
    let finish_reason = match (&tool_invocation, completion.finish_reason.as_str()) {
        (Some(_), _) => FinishReason::ToolCall,
        (None, "length") => FinishReason::Length,
        (None, "stop" | "tool_calls" | "function_call" | "") => FinishReason::Stop,
        (None, _) => FinishReason::Error,
    };
    ChatResponse { content: completion.content, tool_invocation, finish_reason }
}

fn load_cache(path: &Path) -> Result<HashMap<String, ChatResponse>, GatewayError> {
    let file = File::open(path)?;
    let mut map = HashMap::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CacheRecord = serde_json::from_str(&line).map_err(|e| GatewayError::CacheCorrupt {
            path: path.display().to_string(),
            line: i + 1,
            reason: e.to_string(),
        })?;
        // First record wins; record mode never writes a key twice.
        map.entry(record.key).or_insert(record.response);
    }
    Ok(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    fn req(text: &str) -> ChatRequest {
        ChatRequest::new("m", vec![ChatMessage::system("sys"), ChatMessage::user(text)])
    }

    fn echo_backend(counter: Arc<AtomicU64>) -> impl ChatBackend {
        move |r: &ChatRequest| {
            counter.fetch_add(1, Ordering::SeqCst);
            Ok(Completion { content: format!("re: {}", r.messages.last().unwrap().content), finish_reason: "stop".into() })
        }
    }

    #[test]
    fn key_ignores_json_key_order() {
        let a: ChatRequest = serde_json::from_str(
            r#"{"model_id":"m","temperature":0.0,"messages":[{"role":"user","content":"hi"}]}"#,
        )
        .unwrap();
        let b: ChatRequest = serde_json::from_str(
            r#"{"messages":[{"content":"hi","role":"user"}],"temperature":0.0,"model_id":"m"}"#,
        )
        .unwrap();
        assert_eq!(cache_key(&a), cache_key(&b));
    }

    #[test]
    fn key_separates_every_field() {
        let base = req("hi");
        let k = cache_key(&base);
        let mut t = base.clone();
        t.temperature = 0.7;
        assert_ne!(cache_key(&t), k);
        let mut m = base.clone();
        m.model_id = "other".into();
        assert_ne!(cache_key(&m), k);
        let mut n = base.clone();
        n.max_tokens = Some(10);
        assert_ne!(cache_key(&n), k);
        let mut s = base.clone();
        s.tool_schemas = Some(vec![]);
        assert_ne!(cache_key(&s), k);
        assert_ne!(cache_key(&req("hi ")), k, "content is verbatim");
    }

    #[test]
    fn key_is_frozen() {
        // Guards the canonical form across processes and platforms.
        assert_eq!(
            cache_key(&ChatRequest::new("m", vec![ChatMessage::user("hi")])),
            sha256_hex(br#"{"messages":[{"content":"hi","role":"user"}],"model_id":"m","temperature":0.0}"#)
        );
    }

    #[test]
    fn record_then_replay() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("cache.jsonl");
        let calls = Arc::new(AtomicU64::new(0));
        let g = Gateway::with_backend(Mode::Record, Some(&cache), echo_backend(calls.clone())).unwrap();
        let r1 = g.complete(&req("one")).unwrap();
        let r1b = g.complete(&req("one")).unwrap();
        let r2 = g.complete(&req("two")).unwrap();
        assert_eq!(r1, r1b);
        assert_eq!(calls.load(Ordering::SeqCst), 2, "second identical request served from cache");
        drop(g);

        let replay = Gateway::new(&TransportMode {
            mode: Mode::ReplayStrict,
            cache_path: Some(cache.clone()),
            endpoint: Some("http://127.0.0.1:9/poisoned".into()),
            api_key_env: Some("MCPBOX_TEST_UNSET_KEY".into()),
        })
        .unwrap();
        assert_eq!(replay.complete(&req("one")).unwrap(), r1);
        assert_eq!(replay.complete(&req("two")).unwrap(), r2);
        assert!(matches!(replay.complete(&req("three")), Err(GatewayError::CacheMiss { .. })));
        assert_eq!(replay.upstream_calls(), 0);
        assert_eq!(std::fs::read_to_string(&cache).unwrap().lines().count(), 2);
    }

    #[test]
    fn record_appends_to_existing_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("c.jsonl");
        let calls = Arc::new(AtomicU64::new(0));
        let g = Gateway::with_backend(Mode::Record, Some(&cache), echo_backend(calls.clone())).unwrap();
        g.complete(&req("a")).unwrap();
        drop(g);
        let before = std::fs::read_to_string(&cache).unwrap();
        let g = Gateway::with_backend(Mode::Record, Some(&cache), echo_backend(calls.clone())).unwrap();
        g.complete(&req("a")).unwrap();
        g.complete(&req("b")).unwrap();
        let after = std::fs::read_to_string(&cache).unwrap();
        assert!(after.starts_with(&before));
        assert_eq!(after.lines().count(), 2);
        assert_eq!(calls.load(Ordering::SeqCst), 2);
    }

    #[test]
    fn concurrent_record_writes_each_key_once() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("c.jsonl");
        let calls = Arc::new(AtomicU64::new(0));
        let g = Gateway::with_backend(Mode::Record, Some(&cache), echo_backend(calls)).unwrap();
        std::thread::scope(|s| {
            for i in 0..8 {
                let g = &g;
                s.spawn(move || g.complete(&req(&format!("q{}", i % 3))).unwrap());
            }
        });
        let text = std::fs::read_to_string(&cache).unwrap();
        assert_eq!(text.lines().count(), 3);
        for line in text.lines() {
            serde_json::from_str::<CacheRecord>(line).unwrap();
        }
    }

    #[test]
    fn tool_calls_are_parsed_only_when_tools_are_offered() {
        let backend = |_: &ChatRequest| {
            Ok(Completion {
                content: "```tool_call\n{\"tool\":\"echo\",\"arguments\":{\"text\":\"hi\"}}\n```".into(),
                finish_reason: "stop".into(),
            })
        };
        let g = Gateway::with_backend(Mode::Live, None, backend).unwrap();
        let plain = g.complete(&req("x")).unwrap();
        assert_eq!(plain.finish_reason, FinishReason::Stop);
        assert!(plain.tool_invocation.is_none());
        let mut with_tools = req("x");
        with_tools.tool_schemas = Some(vec![]);
        let r = g.complete(&with_tools).unwrap();
        assert_eq!(r.finish_reason, FinishReason::ToolCall);
        assert_eq!(r.tool_invocation.unwrap().tool_name, "echo");
    }

    #[test]
    fn transport_invariants() {
        let bad = TransportMode { mode: Mode::Record, cache_path: None, endpoint: Some("http://x".into()), api_key_env: None };
        assert!(matches!(Gateway::new(&bad), Err(GatewayError::Config(_))));
        let bad = TransportMode { mode: Mode::Live, cache_path: None, endpoint: None, api_key_env: None };
        assert!(matches!(Gateway::new(&bad), Err(GatewayError::Config(_))));
        let no_key = TransportMode {
            mode: Mode::Live,
            cache_path: None,
            endpoint: Some("http://127.0.0.1:9".into()),
            api_key_env: Some("MCPBOX_TEST_UNSET_KEY".into()),
        };
        assert!(matches!(Gateway::new(&no_key), Err(GatewayError::AuthMissing { .. })));
        let empty = req("x");
        let mut e = empty.clone();
        e.messages.clear();
        let g = Gateway::with_backend(Mode::Live, None, |_: &ChatRequest| {
            Ok(Completion { content: String::new(), finish_reason: "stop".into() })
        })
        .unwrap();
        assert!(matches!(g.complete(&e), Err(GatewayError::InvalidRequest(_))));
        let mut t = empty;
        t.temperature = -1.0;
        assert!(matches!(g.complete(&t), Err(GatewayError::InvalidRequest(_))));
    }

    #[test]
    fn replay_rejects_corrupt_cache() {
        let dir = tempfile::tempdir().unwrap();
        let cache = dir.path().join("c.jsonl");
        std::fs::write(&cache, "{not json}\n").unwrap();
        let t = TransportMode { mode: Mode::ReplayStrict, cache_path: Some(cache), endpoint: None, api_key_env: None };
        assert!(matches!(Gateway::new(&t), Err(GatewayError::CacheCorrupt { line: 1, .. })));
    }
}
