//! Text-generation backends.
//!
//! [`Client`] fronts a registry of backends (HTTP endpoints speaking the
//! OpenAI-compatible completion or chat dialect, or an offline mock) with a
//! content-addressed response cache, a retry policy and bounded-concurrency
//! batching.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};
use std::sync::{Mutex, RwLock};
use std::time::Duration;

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("backend `{0}` is not registered")]
    UnknownBackend(String),
    #[error("backend `{backend}` unreachable after {attempts} attempt(s): {message}")]
    Unreachable {
        backend: String,
        attempts: u32,
        message: String,
    },
    #[error("backend `{backend}` rejected the request ({status}): {message}")]
    Rejected {
        backend: String,
        status: u16,
        message: String,
    },
    #[error("backend `{backend}` returned a malformed response: {message}")]
    Malformed { backend: String, message: String },
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("invalid backend configuration: {0}")]
    Config(String),
    #[error("response cache: {0}")]
    Cache(#[from] io::Error),
    #[error("all {count} requests in the batch failed; first error: {first}")]
    AllFailed {
        count: usize,
        first: Box<BackendError>,
    },
}

/// Failure reported by a [`Transport`] for a single attempt.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TransportError {
    /// Connection, DNS or timeout failure; retried.
    Network(String),
    /// Non-success HTTP status. 5xx is retried, 4xx is not.
    Status(u16, String),
    /// The endpoint answered but the body could not be interpreted.
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Dialect {
    #[default]
    Completion,
    Chat,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackendKind {
    #[default]
    Http,
    Mock,
}

/// One entry of the backend registry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendConfig {
    pub id: String,
    #[serde(default)]
    pub kind: BackendKind,
    #[serde(default)]
    pub dialect: Dialect,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub base_url: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub model: Option<String>,
    /// Name of the environment variable holding the API key.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key_env: Option<String>,
    /// Base (not instruction-tuned) model: prompts get a few-shot wrapper.
    #[serde(default)]
    pub base_model: bool,
    /// Mock lookup table, relative to the config file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixture: Option<PathBuf>,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
}

fn default_max_tokens() -> u32 {
    256
}

fn default_timeout_secs() -> u64 {
    60
}

impl BackendConfig {
    pub fn mock(id: &str) -> Self {
        Self {
            id: id.to_string(),
            kind: BackendKind::Mock,
            dialect: Dialect::Completion,
            base_url: None,
            model: None,
            api_key_env: None,
            base_model: false,
            fixture: None,
            max_tokens: default_max_tokens(),
            timeout_secs: default_timeout_secs(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationRequest {
    pub backend_id: String,
    pub prompt_text: String,
    pub temperature: f64,
    pub max_tokens: u32,
    #[serde(default)]
    pub stop_sequences: Vec<String>,
    /// Distinguishes repeated draws of an otherwise identical request.
    #[serde(default)]
    pub sample_index: u32,
    #[serde(default)]
    pub seed: Option<u64>,
}

impl GenerationRequest {
    pub fn new(backend_id: &str, prompt_text: impl Into<String>) -> Self {
        Self {
            backend_id: backend_id.to_string(),
            prompt_text: prompt_text.into(),
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            stop_sequences: Vec::new(),
            sample_index: 0,
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

    pub fn stop(mut self, stops: Vec<String>) -> Self {
        self.stop_sequences = stops;
        self
    }

    pub fn sample_index(mut self, i: u32) -> Self {
        self.sample_index = i;
        self
    }

    pub fn seed(mut self, seed: Option<u64>) -> Self {
        self.seed = seed;
        self
    }

    fn validate(&self) -> Result<(), BackendError> {
        if !self.temperature.is_finite() || self.temperature < 0.0 {
            return Err(BackendError::InvalidRequest(format!(
                "temperature must be a non-negative number, got {}",
                self.temperature
            )));
        }
        if self.max_tokens == 0 {
            return Err(BackendError::InvalidRequest(
                "max_tokens must be >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn cache_key(&self) -> CacheKey {
        CacheKey::of(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationResult {
    pub text: String,
    pub finish_reason: FinishReason,
    #[serde(skip)]
    pub cached: bool,
}

/// SHA-256 over a length-prefixed encoding of every request field.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct CacheKey(String);

impl CacheKey {
    pub fn of(req: &GenerationRequest) -> Self {
        let mut h = Sha256::new();
        let mut field = |tag: u8, bytes: &[u8]| {
            h.update([tag]);
            h.update((bytes.len() as u64).to_le_bytes());
            h.update(bytes);
        };
        field(1, req.backend_id.as_bytes());
        field(2, req.prompt_text.as_bytes());
        field(3, &req.temperature.to_bits().to_le_bytes());
        field(4, &req.max_tokens.to_le_bytes());
        field(5, &(req.stop_sequences.len() as u64).to_le_bytes());
        for s in &req.stop_sequences {
            field(6, s.as_bytes());
        }
        field(7, &req.sample_index.to_le_bytes());
        match req.seed {
            Some(s) => field(8, &s.to_le_bytes()),
            None => field(9, &[]),
        }
        CacheKey(hex::encode(h.finalize()))
    }

    pub fn hex(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for CacheKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Content-addressed result store.
///
/// On disk, each key maps to `<dir>/<first two hex chars>/<hex>.json`. A record
/// is written once and never rewritten; concurrent writers of the same key
/// race on an atomic rename and the values are identical anyway.
pub struct ResponseCache {
    dir: Option<PathBuf>,
    memory: RwLock<HashMap<CacheKey, Vec<u8>>>,
}

impl ResponseCache {
    pub fn in_memory() -> Self {
        Self {
            dir: None,
            memory: RwLock::new(HashMap::new()),
        }
    }

    pub fn open(dir: impl Into<PathBuf>) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            dir: Some(dir),
            memory: RwLock::new(HashMap::new()),
        })
    }

    fn path_for(&self, key: &CacheKey) -> Option<PathBuf> {
        self.dir
            .as_ref()
            .map(|d| d.join(&key.0[..2]).join(format!("{}.json", key.0)))
    }

    pub fn get_raw(&self, key: &CacheKey) -> io::Result<Option<Vec<u8>>> {
        match self.path_for(key) {
            Some(path) => match fs::read(&path) {
                Ok(bytes) => Ok(Some(bytes)),
                Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
                Err(e) => Err(e),
            },
            None => Ok(self.memory.read().unwrap().get(key).cloned()),
        }
    }

    pub fn put_raw(&self, key: &CacheKey, bytes: &[u8]) -> io::Result<()> {
        match self.path_for(key) {
            Some(path) => {
                if path.exists() {
                    return Ok(());
                }
                let parent = path.parent().expect("cache path has a parent");
                fs::create_dir_all(parent)?;
                static SEQ: AtomicU64 = AtomicU64::new(0);
                let tmp = parent.join(format!(
                    ".{}.{}.{}.tmp",
                    key.0,
                    std::process::id(),
                    SEQ.fetch_add(1, Ordering::Relaxed)
                ));
                fs::write(&tmp, bytes)?;
                fs::rename(&tmp, &path)
            }
            None => {
                self.memory
                    .write()
                    .unwrap()
                    .entry(key.clone())
                    .or_insert_with(|| bytes.to_vec());
                Ok(())
            }
        }
    }

    pub fn len(&self) -> usize {
        match &self.dir {
            Some(dir) => fs::read_dir(dir)
                .map(|entries| {
                    entries
                        .filter_map(Result::ok)
                        .filter_map(|e| fs::read_dir(e.path()).ok())
                        .flat_map(|sub| sub.filter_map(Result::ok))
                        .filter(|e| e.path().extension().is_some_and(|x| x == "json"))
                        .count()
                })
                .unwrap_or(0),
            None => self.memory.read().unwrap().len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Output of one successful transport call.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub text: String,
    pub finish_reason: FinishReason,
}

pub trait Transport: Send + Sync {
    fn send(&self, req: &GenerationRequest) -> Result<Completion, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay: Duration,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            max_attempts: 3,
            base_delay: Duration::from_millis(500),
        }
    }
}

struct Registered {
    config: BackendConfig,
    transport: Box<dyn Transport>,
}

/// Registry of backends plus the shared cache. Safe to share across threads.
pub struct Client {
    backends: HashMap<String, Registered>,
    cache: ResponseCache,
    retry: RetryPolicy,
    calls: AtomicU64,
}

impl Client {
    pub fn new(cache: ResponseCache) -> Self {
        Self {
            backends: HashMap::new(),
            cache,
            retry: RetryPolicy::default(),
            calls: AtomicU64::new(0),
        }
    }

    /// Builds transports for every configured backend. Relative fixture
    /// paths resolve against `base_dir`.
    pub fn from_configs(
        configs: &[BackendConfig],
        base_dir: &Path,
        cache: ResponseCache,
    ) -> Result<Self, BackendError> {
        let mut client = Self::new(cache);
        for cfg in configs {
            let transport: Box<dyn Transport> = match cfg.kind {
                BackendKind::Mock => match &cfg.fixture {
                    Some(p) => Box::new(MockTransport::from_file(&base_dir.join(p))?),
                    None => Box::new(MockTransport::echo()),
                },
                BackendKind::Http => Box::new(HttpTransport::new(cfg)?),
            };
            client.register(cfg.clone(), transport)?;
        }
        Ok(client)
    }

    pub fn register(
        &mut self,
        config: BackendConfig,
        transport: Box<dyn Transport>,
    ) -> Result<(), BackendError> {
        if self.backends.contains_key(&config.id) {
            return Err(BackendError::Config(format!(
                "duplicate backend id `{}`",
                config.id
            )));
        }
        self.backends
            .insert(config.id.clone(), Registered { config, transport });
        Ok(())
    }

    pub fn with_retry(mut self, retry: RetryPolicy) -> Self {
        self.retry = retry;
        self
    }

    pub fn backend(&self, id: &str) -> Result<&BackendConfig, BackendError> {
        self.backends
            .get(id)
            .map(|r| &r.config)
            .ok_or_else(|| BackendError::UnknownBackend(id.to_string()))
    }

    /// Number of transport calls issued (cache hits excluded, retries included).
    pub fn call_count(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    pub fn cache(&self) -> &ResponseCache {
        &self.cache
    }

    pub fn generate(&self, req: &GenerationRequest) -> Result<GenerationResult, BackendError> {
        req.validate()?;
        let registered = self
            .backends
            .get(&req.backend_id)
            .ok_or_else(|| BackendError::UnknownBackend(req.backend_id.clone()))?;
        let key = req.cache_key();
        if let Some(bytes) = self.cache.get_raw(&key)? {
            let mut stored: GenerationResult = serde_json::from_slice(&bytes).map_err(|e| {
                BackendError::Cache(io::Error::new(
                    io::ErrorKind::InvalidData,
                    format!("corrupt cache record {key}: {e}"),
                ))
            })?;
            stored.cached = true;
            return Ok(stored);
        }

        let completion = self.send_with_retry(registered, req)?;
        let result = GenerationResult {
            text: completion.text,
            finish_reason: completion.finish_reason,
            cached: false,
        };
        let bytes = serde_json::to_vec(&result).expect("result serializes");
        self.cache.put_raw(&key, &bytes)?;
        Ok(result)
    }

    fn send_with_retry(
        &self,
        registered: &Registered,
        req: &GenerationRequest,
    ) -> Result<Completion, BackendError> {
        let backend = &registered.config.id;
        let attempts = self.retry.max_attempts.max(1);
        let mut last = String::new();
        for attempt in 1..=attempts {
            self.calls.fetch_add(1, Ordering::Relaxed);
            match registered.transport.send(req) {
                Ok(c) => return Ok(c),
                Err(TransportError::Status(status, message)) if (400..500).contains(&status) => {
                    return Err(BackendError::Rejected {
                        backend: backend.clone(),
                        status,
                        message,
                    });
                }
                Err(TransportError::Malformed(message)) => {
                    return Err(BackendError::Malformed {
                        backend: backend.clone(),
                        message,
                    });
                }
                Err(TransportError::Status(status, message)) => {
                    last = format!("status {status}: {message}");
                }
                Err(TransportError::Network(message)) => last = message,
            }
            if attempt < attempts {
                let delay = self.retry.base_delay * 2u32.pow(attempt - 1);
                tracing::debug!(backend = %backend, attempt, ?delay, "retrying after {last}");
                std::thread::sleep(delay);
            }
        }
        Err(BackendError::Unreachable {
            backend: backend.clone(),
            attempts,
            message: last,
        })
    }

    /// Runs requests with at most `max_in_flight` concurrently. Results are
    /// positionally aligned with `reqs`; a failing item does not abort the
    /// others. Fails as a whole only when every request failed.
    pub fn generate_batch(
        &self,
        reqs: &[GenerationRequest],
        max_in_flight: usize,
    ) -> Result<Vec<Result<GenerationResult, BackendError>>, BackendError> {
        if max_in_flight == 0 {
            return Err(BackendError::InvalidRequest(
                "max_in_flight must be >= 1".into(),
            ));
        }
        if reqs.is_empty() {
            return Ok(Vec::new());
        }
        let workers = max_in_flight.min(reqs.len());
        let mut results: Vec<Option<Result<GenerationResult, BackendError>>> =
            (0..reqs.len()).map(|_| None).collect();
        if workers == 1 {
            for (slot, req) in results.iter_mut().zip(reqs) {
                *slot = Some(self.generate(req));
            }
        } else {
            let next = AtomicUsize::new(0);
            let done = Mutex::new(Vec::with_capacity(reqs.len()));
            std::thread::scope(|s| {
                for _ in 0..workers {
                    s.spawn(|| loop {
                        let i = next.fetch_add(1, Ordering::Relaxed);
                        if i >= reqs.len() {
                            break;
                        }
                        let r = self.generate(&reqs[i]);
                        done.lock().unwrap().push((i, r));
                    });
                }
            });
            for (i, r) in done.into_inner().unwrap() {
                results[i] = Some(r);
            }
        }
        let results: Vec<_> = results
            .into_iter()
            .map(|r| r.expect("every slot filled"))
            .collect();
        if results.iter().all(Result::is_err) {
            let count = results.len();
            let first = results
                .into_iter()
                .find_map(Result::err)
                .expect("non-empty");
            return Err(BackendError::AllFailed {
                count,
                first: Box::new(first),
            });
        }
        Ok(results)
    }

    /// Like [`Client::generate_batch`] but fails on the first item error.
    pub fn generate_all(
        &self,
        reqs: &[GenerationRequest],
        max_in_flight: usize,
    ) -> Result<Vec<GenerationResult>, BackendError> {
        self.generate_batch(reqs, max_in_flight)?
            .into_iter()
            .collect()
    }
}

/// Offline backend answering from a lookup table.
///
/// Fixture format (JSON):
///
/// ```json
/// {"entries": [
///   {"prompt": "Q1", "sample_index": 0, "text": "cello"},
///   {"contains": "What instrument", "texts": ["cello", "the cello", "violin"]},
///   {"prompt": "bad", "error": "rejected"}
/// ]}
/// ```
///
/// Exact `prompt` entries are consulted before `contains` entries; within
/// each group the first matching entry in file order wins. `texts` is
/// indexed by `sample_index` modulo its length. A prompt with no matching
/// entry is rejected.
#[derive(Debug, Clone, Default)]
pub struct MockTransport {
    entries: Vec<MockEntry>,
    echo: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MockEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sample_index: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub texts: Vec<String>,
    /// Simulated failure: "rejected", "unreachable", "server_error" or "malformed".
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Deserialize)]
struct MockFixture {
    #[serde(default)]
    entries: Vec<MockEntry>,
    #[serde(default)]
    echo: bool,
}

impl MockEntry {
    pub fn exact(prompt: &str, text: &str) -> Self {
        Self {
            prompt: Some(prompt.to_string()),
            contains: None,
            sample_index: None,
            text: Some(text.to_string()),
            texts: Vec::new(),
            error: None,
        }
    }

    pub fn contains(needle: &str, texts: &[&str]) -> Self {
        Self {
            prompt: None,
            contains: Some(needle.to_string()),
            sample_index: None,
            text: None,
            texts: texts.iter().map(|s| s.to_string()).collect(),
            error: None,
        }
    }

    pub fn at_index(mut self, i: u32) -> Self {
        self.sample_index = Some(i);
        self
    }

    pub fn failing(mut self, kind: &str) -> Self {
        self.error = Some(kind.to_string());
        self
    }

    fn index_matches(&self, i: u32) -> bool {
        self.sample_index.is_none_or(|s| s == i)
    }
}

impl MockTransport {
    pub fn new(entries: Vec<MockEntry>) -> Self {
        Self {
            entries,
            echo: false,
        }
    }

    /// Returns every prompt unchanged.
    pub fn echo() -> Self {
        Self {
            entries: Vec::new(),
            echo: true,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let raw = fs::read_to_string(path)
            .map_err(|e| BackendError::Config(format!("mock fixture {}: {e}", path.display())))?;
        let fixture: MockFixture = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Config(format!("mock fixture {}: {e}", path.display())))?;
        Ok(Self {
            entries: fixture.entries,
            echo: fixture.echo,
        })
    }

    fn lookup(&self, req: &GenerationRequest) -> Option<&MockEntry> {
        let i = req.sample_index;
        self.entries
            .iter()
            .find(|e| e.prompt.as_deref() == Some(req.prompt_text.as_str()) && e.index_matches(i))
            .or_else(|| {
                self.entries.iter().find(|e| {
                    e.contains
                        .as_deref()
                        .is_some_and(|c| req.prompt_text.contains(c))
                        && e.index_matches(i)
                })
            })
    }
}

impl Transport for MockTransport {
    fn send(&self, req: &GenerationRequest) -> Result<Completion, TransportError> {
        let text = match self.lookup(req) {
            Some(entry) => {
                if let Some(kind) = &entry.error {
                    return Err(match kind.as_str() {
                        "unreachable" => TransportError::Network("mock: unreachable".into()),
                        "server_error" => TransportError::Status(503, "mock: unavailable".into()),
                        "malformed" => TransportError::Malformed("mock: malformed".into()),
                        _ => TransportError::Status(400, "mock: rejected".into()),
                    });
                }
                if !entry.texts.is_empty() {
                    entry.texts[req.sample_index as usize % entry.texts.len()].clone()
                } else {
                    entry.text.clone().unwrap_or_default()
                }
            }
            None if self.echo => req.prompt_text.clone(),
            None => {
                return Err(TransportError::Status(
                    404,
                    format!(
                        "mock: no fixture entry for prompt {:?} (sample {})",
                        truncate_for_log(&req.prompt_text),
                        req.sample_index
                    ),
                ))
            }
        };
        Ok(Completion {
            text: apply_stop(text, &req.stop_sequences),
            finish_reason: FinishReason::Stop,
        })
    }
}

fn apply_stop(mut text: String, stops: &[String]) -> String {
    let cut = stops
        .iter()
        .filter(|s| !s.is_empty())
        .filter_map(|s| text.find(s.as_str()))
        .min();
    if let Some(cut) = cut {
        text.truncate(cut);
    }
    text
}

fn truncate_for_log(s: &str) -> String {
    const MAX: usize = 120;
    if s.chars().count() <= MAX {
        s.to_string()
    } else {
        let head: String = s.chars().take(MAX).collect();
        format!("{head}…")
    }
}

/// OpenAI-compatible HTTP endpoint (`/completions` or `/chat/completions`).
pub struct HttpTransport {
    http: reqwest::blocking::Client,
    url: String,
    model: Option<String>,
    dialect: Dialect,
    api_key: Option<String>,
}

impl HttpTransport {
    pub fn new(cfg: &BackendConfig) -> Result<Self, BackendError> {
        let base = cfg
            .base_url
            .as_deref()
            .ok_or_else(|| BackendError::Config(format!("backend `{}` has no base_url", cfg.id)))?;
        let path = match cfg.dialect {
            Dialect::Completion => "completions",
            Dialect::Chat => "chat/completions",
        };
        let api_key = match &cfg.api_key_env {
            Some(var) => Some(std::env::var(var).map_err(|_| {
                BackendError::Config(format!(
                    "backend `{}`: environment variable {var} is not set",
                    cfg.id
                ))
            })?),
            None => None,
        };
        let http = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        Ok(Self {
            http,
            url: format!("{}/{path}", base.trim_end_matches('/')),
            model: cfg.model.clone(),
            dialect: cfg.dialect,
            api_key,
        })
    }

    fn body(&self, req: &GenerationRequest) -> serde_json::Value {
        let mut body = serde_json::json!({
            "temperature": req.temperature,
            "max_tokens": req.max_tokens,
        });
        match self.dialect {
            Dialect::Completion => body["prompt"] = req.prompt_text.clone().into(),
            Dialect::Chat => {
                body["messages"] = serde_json::json!([{"role": "user", "content": req.prompt_text}])
            }
        }
        if let Some(model) = &self.model {
            body["model"] = model.clone().into();
        }
        if !req.stop_sequences.is_empty() {
            body["stop"] = req.stop_sequences.clone().into();
        }
        if let Some(seed) = req.seed {
            body["seed"] = seed.into();
        }
        body
    }
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
}

#[derive(Deserialize)]
struct WireChoice {
    #[serde(default)]
    text: Option<String>,
    #[serde(default)]
    message: Option<WireMessage>,
    #[serde(default)]
    finish_reason: Option<String>,
}

#[derive(Deserialize)]
struct WireMessage {
    #[serde(default)]
    content: Option<String>,
}

/// Extracts the first choice from a completion or chat response body.
pub fn parse_wire_response(dialect: Dialect, body: &str) -> Result<Completion, TransportError> {
    let wire: WireResponse =
        serde_json::from_str(body).map_err(|e| TransportError::Malformed(e.to_string()))?;
    let choice = wire
        .choices
        .into_iter()
        .next()
        .ok_or_else(|| TransportError::Malformed("no choices".into()))?;
    let text = match dialect {
        Dialect::Completion => choice.text,
        Dialect::Chat => choice.message.and_then(|m| m.content),
    }
    .ok_or_else(|| TransportError::Malformed("choice carries no text".into()))?;
    let finish_reason = match choice.finish_reason.as_deref() {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    Ok(Completion {
        text,
        finish_reason,
    })
}

impl Transport for HttpTransport {
    fn send(&self, req: &GenerationRequest) -> Result<Completion, TransportError> {
        let mut builder = self.http.post(&self.url).json(&self.body(req));
        if let Some(key) = &self.api_key {
            builder = builder.bearer_auth(key);
        }
        let resp = builder
            .send()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        let status = resp.status();
        let body = resp
            .text()
            .map_err(|e| TransportError::Network(e.to_string()))?;
        if !status.is_success() {
            return Err(TransportError::Status(status.as_u16(), body));
        }
        parse_wire_response(self.dialect, &body)
    }
}
