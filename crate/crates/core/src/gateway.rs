//! Chat-completion gateway.
//!
//! A [`Gateway`] wraps one [`ChatBackend`] (the OpenAI-compatible HTTP client
//! or a scripted mock) and adds a content-addressed response cache, retry with
//! exponential backoff, and a cap on concurrently outstanding backend calls.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::time::Duration;

use regex::Regex;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;
use tracing::{debug, warn};

use crate::canonical::{canonical_json, sha256_hex};

/// Environment variable that overrides `cache_dir` for every backend.
pub const CACHE_DIR_ENV: &str = "PF_CACHE_DIR";

/// Temperature used for generation calls unless overridden.
pub const GENERATION_TEMPERATURE: f64 = 0.8;
/// Temperature used for probe and classification calls unless overridden.
pub const PROBE_TEMPERATURE: f64 = 0.0;

const DEMO_MOCK_SCRIPT: &str = include_str!("../assets/demo_mock.json");

#[derive(Debug, Clone, Error, PartialEq)]
pub enum GatewayError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend config: {0}")]
    InvalidConfig(String),
    #[error("API key environment variable `{0}` is not set")]
    MissingApiKey(String),
    #[error("transport error: {0}")]
    Transport(String),
    #[error("backend returned HTTP {status}: {body}")]
    Status { status: u16, body: String },
    #[error("response body lacks choices[0].message.content: {0}")]
    MalformedBody(String),
    #[error("backend returned an empty response")]
    EmptyResponse,
    #[error("mock script error: {0}")]
    Script(String),
    #[error("gave up after {attempts} attempts: {last}")]
    RetriesExhausted { attempts: u32, last: Box<GatewayError> },
}

impl GatewayError {
    /// Transport failures, 429 and 5xx are worth retrying; nothing else is.
    pub fn is_retryable(&self) -> bool {
        match self {
            GatewayError::Transport(_) => true,
            GatewayError::Status { status, .. } => *status == 429 || (500..600).contains(status),
            _ => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    User,
    Assistant,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::User => "user",
            Role::Assistant => "assistant",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Turn {
    pub role: Role,
    pub text: String,
}

impl Turn {
    pub fn user(text: impl Into<String>) -> Self {
        Self { role: Role::User, text: text.into() }
    }

    pub fn assistant(text: impl Into<String>) -> Self {
        Self { role: Role::Assistant, text: text.into() }
    }
}

/// One chat-completion call: a system prompt plus an alternating transcript
/// that must end on a user turn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub system: String,
    pub turns: Vec<Turn>,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<i64>,
}

impl ChatRequest {
    pub fn new(model: impl Into<String>, system: impl Into<String>, user: impl Into<String>) -> Self {
        Self {
            model: model.into(),
            system: system.into(),
            turns: vec![Turn::user(user)],
            temperature: PROBE_TEMPERATURE,
            max_tokens: 512,
            seed: None,
        }
    }

    pub fn temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }

    pub fn max_tokens(mut self, n: u32) -> Self {
        self.max_tokens = n;
        self
    }

    pub fn seed(mut self, seed: Option<i64>) -> Self {
        self.seed = seed;
        self
    }

    /// Continues the conversation: records the backend's previous answer and
    /// asks a follow-up.
    pub fn follow_up(&self, previous_reply: &str, user: impl Into<String>) -> Self {
        let mut next = self.clone();
        next.turns.push(Turn::assistant(previous_reply));
        next.turns.push(Turn::user(user));
        next
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        let last = self
            .turns
            .last()
            .ok_or_else(|| GatewayError::InvalidRequest("turns must not be empty".into()))?;
        if last.role != Role::User {
            return Err(GatewayError::InvalidRequest("last turn must be a user turn".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(GatewayError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(GatewayError::InvalidRequest("max_tokens must be positive".into()));
        }
        Ok(())
    }

    /// Plain-text rendering that mock rules match against:
    ///
    /// ```text
    /// [system]
    /// <system prompt>
    /// [user]
    /// <text>
    /// [assistant]
    /// <text>
    /// ```
    pub fn rendered(&self) -> String {
        let mut out = format!("[system]\n{}", self.system);
        for turn in &self.turns {
            out.push_str(&format!("\n[{}]\n{}", turn.role.as_str(), turn.text));
        }
        out
    }

    pub fn last_user_text(&self) -> &str {
        self.turns
            .iter()
            .rev()
            .find(|t| t.role == Role::User)
            .map(|t| t.text.as_str())
            .unwrap_or("")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub text: String,
    pub finish_reason: FinishReason,
    pub cached: bool,
    /// Set only on error responses produced by [`Gateway::complete_batch`].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ChatResponse {
    fn failed(err: &GatewayError) -> Self {
        Self { text: String::new(), finish_reason: FinishReason::Error, cached: false, error: Some(err.to_string()) }
    }

    pub fn is_error(&self) -> bool {
        self.finish_reason == FinishReason::Error
    }
}

/// What a backend hands back before caching and bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct BackendReply {
    pub text: String,
    pub finish_reason: FinishReason,
}

impl BackendReply {
    pub fn stop(text: impl Into<String>) -> Self {
        Self { text: text.into(), finish_reason: FinishReason::Stop }
    }
}

/// A source of completions. Implementations must be safe to call from many
/// threads at once.
pub trait ChatBackend: Send + Sync {
    /// Stable identifier that participates in the cache key.
    fn id(&self) -> String;

    fn send(&self, req: &ChatRequest) -> Result<BackendReply, GatewayError>;
}

impl<F> ChatBackend for F
where
    F: Fn(&ChatRequest) -> Result<BackendReply, GatewayError> + Send + Sync,
{
    fn id(&self) -> String {
        "fn".into()
    }

    fn send(&self, req: &ChatRequest) -> Result<BackendReply, GatewayError> {
        self(req)
    }
}

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Live,
    Mock,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_backoff_ms: u64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self { max_attempts: 4, base_backoff_ms: 500 }
    }
}

impl RetryPolicy {
    /// Sleep before attempt `attempt` (1-based; the first attempt never waits).
    pub fn backoff(&self, attempt: u32) -> Duration {
        if attempt <= 1 {
            return Duration::ZERO;
        }
        let factor = 1u64 << (attempt - 2).min(20);
        Duration::from_millis(self.base_backoff_ms.saturating_mul(factor))
    }
}

fn default_model() -> String {
    "gpt-4o".into()
}

fn default_in_flight() -> usize {
    4
}

fn default_timeout() -> u64 {
    120
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub kind: BackendKind,
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    #[serde(default = "default_in_flight")]
    pub max_in_flight: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cache_dir: Option<PathBuf>,
    /// Mock only: JSON script file. The built-in demo script is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mock_script: Option<PathBuf>,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
}

impl BackendConfig {
    pub fn mock() -> Self {
        Self {
            kind: BackendKind::Mock,
            model: "mock".into(),
            base_url: None,
            api_key_env: None,
            max_in_flight: default_in_flight(),
            retry: RetryPolicy { max_attempts: 1, base_backoff_ms: 0 },
            cache_dir: None,
            mock_script: None,
            timeout_secs: default_timeout(),
        }
    }

    pub fn live(base_url: impl Into<String>, api_key_env: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            kind: BackendKind::Live,
            model: model.into(),
            base_url: Some(base_url.into()),
            api_key_env: Some(api_key_env.into()),
            max_in_flight: default_in_flight(),
            retry: RetryPolicy::default(),
            cache_dir: None,
            mock_script: None,
            timeout_secs: default_timeout(),
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_in_flight == 0 {
            return Err(GatewayError::InvalidConfig("max_in_flight must be at least 1".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(GatewayError::InvalidConfig("retry.max_attempts must be at least 1".into()));
        }
        if self.kind == BackendKind::Live {
            if self.base_url.as_deref().is_none_or(str::is_empty) {
                return Err(GatewayError::InvalidConfig("live backend requires base_url".into()));
            }
            if self.api_key_env.as_deref().is_none_or(str::is_empty) {
                return Err(GatewayError::InvalidConfig("live backend requires api_key_env".into()));
            }
        }
        Ok(())
    }

    /// `cache_dir` after applying the `PF_CACHE_DIR` override.
    pub fn effective_cache_dir(&self) -> Option<PathBuf> {
        match std::env::var_os(CACHE_DIR_ENV) {
            Some(dir) if !dir.is_empty() => Some(PathBuf::from(dir)),
            _ => self.cache_dir.clone(),
        }
    }
}

// ---------------------------------------------------------------------------
// Mock backend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Matcher {
    /// Literal substring of the rendered request.
    Contains(String),
    /// Regular expression over the rendered request; its capture groups can be
    /// referenced from the reply as `$1` or `${name}`.
    Pattern(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(flatten)]
    pub matcher: Matcher,
    pub reply: String,
}

/// First-match rule list with a mandatory fallback reply.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    pub default: String,
}

impl MockScript {
    pub fn with_default(default: impl Into<String>) -> Self {
        Self { rules: Vec::new(), default: default.into() }
    }

    pub fn contains(mut self, needle: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push(MockRule { matcher: Matcher::Contains(needle.into()), reply: reply.into() });
        self
    }

    pub fn pattern(mut self, pattern: impl Into<String>, reply: impl Into<String>) -> Self {
        self.rules.push(MockRule { matcher: Matcher::Pattern(pattern.into()), reply: reply.into() });
        self
    }

    /// Replies with the text of the last user turn.
    pub fn echo() -> Self {
        Self::with_default("").pattern(r"(?s)^.*\[user\]\n(.*)$", "$1")
    }

    /// The script bundled with the binary; it plays every pipeline stage with
    /// characters that follow their embedded behavior.
    pub fn demo() -> Self {
        serde_json::from_str(DEMO_MOCK_SCRIPT).expect("bundled demo script parses")
    }

    pub fn load(path: &Path) -> Result<Self, GatewayError> {
        let text = fs::read_to_string(path)
            .map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| GatewayError::Script(format!("{}: {e}", path.display())))
    }

    pub fn digest(&self) -> String {
        crate::canonical::digest_of(self)
    }
}

enum CompiledMatcher {
    Contains(String),
    Pattern(Regex),
}

/// Deterministic backend driven by a [`MockScript`].
pub struct MockBackend {
    rules: Vec<(CompiledMatcher, String)>,
    default: String,
    digest: String,
}

impl MockBackend {
    pub fn new(script: &MockScript) -> Result<Self, GatewayError> {
        let mut rules = Vec::with_capacity(script.rules.len());
        for rule in &script.rules {
            let matcher = match &rule.matcher {
                Matcher::Contains(s) => CompiledMatcher::Contains(s.clone()),
                Matcher::Pattern(p) => CompiledMatcher::Pattern(
                    Regex::new(p).map_err(|e| GatewayError::Script(format!("bad pattern `{p}`: {e}")))?,
                ),
            };
            rules.push((matcher, rule.reply.clone()));
        }
        Ok(Self { rules, default: script.default.clone(), digest: script.digest() })
    }

    pub fn reply_for(&self, rendered: &str) -> String {
        for (matcher, reply) in &self.rules {
            match matcher {
                CompiledMatcher::Contains(needle) => {
                    if rendered.contains(needle.as_str()) {
                        return reply.clone();
                    }
                }
                CompiledMatcher::Pattern(re) => {
                    if let Some(caps) = re.captures(rendered) {
                        let mut out = String::new();
                        caps.expand(reply, &mut out);
                        return out;
                    }
                }
            }
        }
        self.default.clone()
    }
}

impl ChatBackend for MockBackend {
    fn id(&self) -> String {
        format!("mock:{}", &self.digest[..16])
    }

    fn send(&self, req: &ChatRequest) -> Result<BackendReply, GatewayError> {
        Ok(BackendReply::stop(self.reply_for(&req.rendered())))
    }
}

// ---------------------------------------------------------------------------
// Live backend
// ---------------------------------------------------------------------------

/// OpenAI-compatible `POST {base_url}/v1/chat/completions` client.
pub struct LiveBackend {
    endpoint: String,
    api_key: String,
    client: reqwest::blocking::Client,
}

impl LiveBackend {
    pub fn new(base_url: &str, api_key: String, timeout: Duration) -> Result<Self, GatewayError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(timeout)
            .build()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        Ok(Self {
            endpoint: format!("{}/v1/chat/completions", base_url.trim_end_matches('/')),
            api_key,
            client,
        })
    }

    pub fn endpoint(&self) -> &str {
        &self.endpoint
    }
}

/// JSON body for the chat-completions endpoint.
pub fn wire_body(req: &ChatRequest) -> Value {
    let mut messages = vec![json!({"role": "system", "content": req.system})];
    messages.extend(req.turns.iter().map(|t| json!({"role": t.role.as_str(), "content": t.text})));
    let mut body = json!({
        "model": req.model,
        "messages": messages,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
    });
    if let Some(seed) = req.seed {
        body["seed"] = json!(seed);
    }
    body
}

/// Pulls `choices[0].message.content` (and the finish reason) out of a
/// chat-completions response body.
pub fn parse_wire_response(body: &str) -> Result<BackendReply, GatewayError> {
    let value: Value = serde_json::from_str(body).map_err(|e| GatewayError::MalformedBody(e.to_string()))?;
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| GatewayError::MalformedBody("missing choices[0]".into()))?;
    let text = choice
        .get("message")
        .and_then(|m| m.get("content"))
        .and_then(Value::as_str)
        .ok_or_else(|| GatewayError::MalformedBody("missing message.content".into()))?;
    let finish_reason = match choice.get("finish_reason").and_then(Value::as_str) {
        Some("length") => FinishReason::Length,
        _ => FinishReason::Stop,
    };
    Ok(BackendReply { text: text.to_string(), finish_reason })
}

impl ChatBackend for LiveBackend {
    fn id(&self) -> String {
        format!("live:{}", self.endpoint)
    }

    fn send(&self, req: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let resp = self
            .client
            .post(&self.endpoint)
            .bearer_auth(&self.api_key)
            .json(&wire_body(req))
            .send()
            .map_err(|e| GatewayError::Transport(e.to_string()))?;
        let status = resp.status();
        let body = resp.text().map_err(|e| GatewayError::Transport(e.to_string()))?;
        if !status.is_success() {
            let mut body = body;
            body.truncate(500);
            return Err(GatewayError::Status { status: status.as_u16(), body });
        }
        parse_wire_response(&body)
    }
}

// ---------------------------------------------------------------------------
// Cache
// ---------------------------------------------------------------------------

/// 64-char lowercase hex SHA-256 over the canonical JSON of the request
/// fields that determine a completion.
pub fn cache_key(req: &ChatRequest, backend_id: &str) -> String {
    let turns: Vec<Value> = req
        .turns
        .iter()
        .map(|t| json!({"role": t.role.as_str(), "text": t.text}))
        .collect();
    let value = json!({
        "backend_id": backend_id,
        "model": req.model,
        "system": req.system,
        "turns": turns,
        "temperature": req.temperature,
        "max_tokens": req.max_tokens,
        "seed": req.seed,
    });
    sha256_hex(canonical_json(&value).as_bytes())
}

#[derive(Debug, Serialize, Deserialize)]
struct CacheEntry {
    key: String,
    text: String,
    finish_reason: FinishReason,
}

/// One JSON file per key. Unreadable or mismatched files count as misses, and
/// the first stored response for a key is never overwritten.
#[derive(Debug, Clone)]
pub struct ResponseCache {
    dir: PathBuf,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &str) -> PathBuf {
        self.dir.join(format!("{key}.json"))
    }

    pub fn get(&self, key: &str) -> Option<BackendReply> {
        let bytes = fs::read(self.path_for(key)).ok()?;
        match serde_json::from_slice::<CacheEntry>(&bytes) {
            Ok(entry) if entry.key == key && !entry.text.is_empty() => {
                Some(BackendReply { text: entry.text, finish_reason: entry.finish_reason })
            }
            _ => {
                debug!(key, "ignoring corrupt cache entry");
                None
            }
        }
    }

    pub fn put(&self, key: &str, reply: &BackendReply) -> std::io::Result<()> {
        fs::create_dir_all(&self.dir)?;
        let final_path = self.path_for(key);
        if self.get(key).is_some() {
            return Ok(());
        }
        let entry = CacheEntry { key: key.to_string(), text: reply.text.clone(), finish_reason: reply.finish_reason };
        let tmp = self.dir.join(format!(
            ".{key}.{}.{}.tmp",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&serde_json::to_vec(&entry).expect("cache entry serializes"))?;
            f.sync_all()?;
        }
        // A corrupt file at the final path is replaced; a valid one wins.
        let result = match fs::hard_link(&tmp, &final_path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                if self.get(key).is_none() {
                    fs::rename(&tmp, &final_path)
                } else {
                    Ok(())
                }
            }
            Err(e) => Err(e),
        };
        let _ = fs::remove_file(&tmp);
        result
    }
}

// ---------------------------------------------------------------------------
// Gateway
// ---------------------------------------------------------------------------

struct Limiter {
    available: Mutex<usize>,
    freed: Condvar,
}

struct Permit<'a>(&'a Limiter);

impl Limiter {
    fn new(n: usize) -> Self {
        Self { available: Mutex::new(n), freed: Condvar::new() }
    }

    fn acquire(&self) -> Permit<'_> {
        let mut n = self.available.lock().unwrap();
        while *n == 0 {
            n = self.freed.wait(n).unwrap();
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        *self.0.available.lock().unwrap() += 1;
        self.0.freed.notify_one();
    }
}

/// Call counters for a gateway.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct GatewayStats {
    pub requests: u64,
    pub backend_calls: u64,
    pub cache_hits: u64,
    pub errors: u64,
}

pub struct Gateway {
    backend: Arc<dyn ChatBackend>,
    backend_id: String,
    model: String,
    cache: Option<ResponseCache>,
    retry: RetryPolicy,
    max_in_flight: usize,
    limiter: Limiter,
    requests: AtomicU64,
    backend_calls: AtomicU64,
    cache_hits: AtomicU64,
    errors: AtomicU64,
}

impl Gateway {
    pub fn new(
        backend: Arc<dyn ChatBackend>,
        model: impl Into<String>,
        max_in_flight: usize,
        retry: RetryPolicy,
        cache_dir: Option<PathBuf>,
    ) -> Self {
        let max_in_flight = max_in_flight.max(1);
        Self {
            backend_id: backend.id(),
            backend,
            model: model.into(),
            cache: cache_dir.map(ResponseCache::new),
            retry: RetryPolicy { max_attempts: retry.max_attempts.max(1), ..retry },
            max_in_flight,
            limiter: Limiter::new(max_in_flight),
            requests: AtomicU64::new(0),
            backend_calls: AtomicU64::new(0),
            cache_hits: AtomicU64::new(0),
            errors: AtomicU64::new(0),
        }
    }

    /// Gateway over an arbitrary backend: no cache, single attempt, four
    /// calls in flight.
    pub fn with_backend(backend: impl ChatBackend + 'static) -> Self {
        Self::new(Arc::new(backend), "mock", 4, RetryPolicy { max_attempts: 1, base_backoff_ms: 0 }, None)
    }

    pub fn mock(script: &MockScript) -> Result<Self, GatewayError> {
        Ok(Self::with_backend(MockBackend::new(script)?))
    }

    pub fn from_config(cfg: &BackendConfig) -> Result<Self, GatewayError> {
        cfg.validate()?;
        let backend: Arc<dyn ChatBackend> = match cfg.kind {
            BackendKind::Mock => {
                let script = match &cfg.mock_script {
                    Some(path) => MockScript::load(path)?,
                    None => MockScript::demo(),
                };
                Arc::new(MockBackend::new(&script)?)
            }
            BackendKind::Live => {
                let env = cfg.api_key_env.as_deref().unwrap_or_default();
                let key = std::env::var(env)
                    .ok()
                    .filter(|k| !k.is_empty())
                    .ok_or_else(|| GatewayError::MissingApiKey(env.to_string()))?;
                let base = cfg.base_url.as_deref().unwrap_or_default();
                Arc::new(LiveBackend::new(base, key, Duration::from_secs(cfg.timeout_secs))?)
            }
        };
        Ok(Self::new(backend, cfg.model.clone(), cfg.max_in_flight, cfg.retry.clone(), cfg.effective_cache_dir()))
    }

    pub fn backend_id(&self) -> &str {
        &self.backend_id
    }

    /// Default model name for requests built by pipeline stages.
    pub fn model(&self) -> &str {
        &self.model
    }

    pub fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }

    pub fn stats(&self) -> GatewayStats {
        GatewayStats {
            requests: self.requests.load(Ordering::Relaxed),
            backend_calls: self.backend_calls.load(Ordering::Relaxed),
            cache_hits: self.cache_hits.load(Ordering::Relaxed),
            errors: self.errors.load(Ordering::Relaxed),
        }
    }

    pub fn complete(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        self.requests.fetch_add(1, Ordering::Relaxed);
        let result = self.complete_inner(req);
        if result.is_err() {
            self.errors.fetch_add(1, Ordering::Relaxed);
        }
        result
    }

    fn complete_inner(&self, req: &ChatRequest) -> Result<ChatResponse, GatewayError> {
        req.validate()?;
        let key = self.cache.as_ref().map(|_| cache_key(req, &self.backend_id));
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Some(hit) = cache.get(key) {
                self.cache_hits.fetch_add(1, Ordering::Relaxed);
                return Ok(ChatResponse { text: hit.text, finish_reason: hit.finish_reason, cached: true, error: None });
            }
        }

        let reply = self.send_with_retry(req)?;
        if reply.text.is_empty() {
            return Err(GatewayError::EmptyResponse);
        }
        if let (Some(cache), Some(key)) = (&self.cache, &key) {
            if let Err(e) = cache.put(key, &reply) {
                warn!(error = %e, "failed to write cache entry");
            }
            // Another writer may have stored a different response first.
            if let Some(stored) = cache.get(key) {
                return Ok(ChatResponse { text: stored.text, finish_reason: stored.finish_reason, cached: false, error: None });
            }
        }
        Ok(ChatResponse { text: reply.text, finish_reason: reply.finish_reason, cached: false, error: None })
    }

    fn send_with_retry(&self, req: &ChatRequest) -> Result<BackendReply, GatewayError> {
        let mut attempt = 1;
        loop {
            std::thread::sleep(self.retry.backoff(attempt));
            let result = {
                let _permit = self.limiter.acquire();
                self.backend_calls.fetch_add(1, Ordering::Relaxed);
                self.backend.send(req)
            };
            match result {
                Ok(reply) => return Ok(reply),
                Err(e) if e.is_retryable() && attempt < self.retry.max_attempts => {
                    debug!(attempt, error = %e, "retrying backend call");
                    attempt += 1;
                }
                Err(e) if e.is_retryable() && attempt > 1 => {
                    return Err(GatewayError::RetriesExhausted { attempts: attempt, last: Box::new(e) })
                }
                Err(e) => return Err(e),
            }
        }
    }

    /// Completes every request, preserving input order. Failures become
    /// error responses in place; the batch itself never fails.
    pub fn complete_batch(&self, reqs: &[ChatRequest]) -> Vec<ChatResponse> {
        parallel_map(reqs, self.max_in_flight, |r| {
            self.complete(r).unwrap_or_else(|e| ChatResponse::failed(&e))
        })
    }
}

/// Maps `f` over `items` on up to `workers` threads, keeping input order.
pub fn parallel_map<T, R, F>(items: &[T], workers: usize, f: F) -> Vec<R>
where
    T: Sync,
    R: Send,
    F: Fn(&T) -> R + Sync,
{
    if items.is_empty() {
        return Vec::new();
    }
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<R>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|scope| {
        for _ in 0..workers.clamp(1, items.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                let r = f(&items[i]);
                *slots[i].lock().unwrap() = Some(r);
            });
        }
    });
    slots.into_iter().map(|s| s.into_inner().unwrap().expect("every slot filled")).collect()
}
