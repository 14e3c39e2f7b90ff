//! Chat-completion calls behind one interface.
//!
//! A [`Gateway`] pairs a [`ProviderConfig`] with a [`ChatBackend`]. Remote
//! backends speak one of three wire dialects over HTTP; the two mock
//! backends replay recorded answers or classify with a centroid model, so
//! every pipeline can run offline.
//!
//! Wire dialects:
//!
//! | dialect | endpoint | system text | usage counts |
//! |---|---|---|---|
//! | `openai-chat` | `POST /v1/chat/completions` | first `messages` entry, role `system` | `usage.prompt_tokens`, `usage.completion_tokens` |
//! | `anthropic-messages` | `POST /v1/messages` | top-level `system` field | `usage.input_tokens`, `usage.output_tokens` |
//! | `cohere-generate` | `POST /v1/generate` | flattened into `prompt` | `meta.billed_units.input_tokens`, `.output_tokens` |
//!
//! Requests use temperature 0 and a newline stop sequence.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::embedder::{embed_batch, EmbeddingBackend, EmbeddingCache};
use crate::ledger::{Ledger, LedgerError, UsageRecord};
use crate::promptkit::{PromptBundle, Role, TokenEstimator};
use crate::retriever::CentroidModel;

#[derive(Debug, Clone, PartialEq, Eq, Error, Serialize, Deserialize)]
pub enum GatewayError {
    #[error("prompt needs ~{estimate} tokens plus the completion reserve, limit is {limit}")]
    ContextOverflow { estimate: u64, limit: u64 },
    #[error("provider returned {status}: {body}")]
    ProviderError { status: u16, body: String },
    #[error("gave up after {attempts} attempts: {last_error}")]
    RetriesExhausted { attempts: u32, last_error: String },
    #[error("api key environment variable {0} is not set")]
    AuthMissing(String),
    #[error("batch aborted at item {index}: {error}")]
    BatchAborted { index: usize, error: String },
    #[error("ledger: {0}")]
    Ledger(String),
    #[error("invalid provider config: {0}")]
    InvalidConfig(String),
}

impl From<LedgerError> for GatewayError {
    fn from(e: LedgerError) -> Self {
        GatewayError::Ledger(e.to_string())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum Dialect {
    OpenaiChat,
    AnthropicMessages,
    CohereGenerate,
    MockReplay { path: PathBuf },
    MockCentroidOracle,
}

impl Dialect {
    pub fn is_remote(&self) -> bool {
        matches!(
            self,
            Dialect::OpenaiChat | Dialect::AnthropicMessages | Dialect::CohereGenerate
        )
    }

    pub fn name(&self) -> &'static str {
        match self {
            Dialect::OpenaiChat => "openai-chat",
            Dialect::AnthropicMessages => "anthropic-messages",
            Dialect::CohereGenerate => "cohere-generate",
            Dialect::MockReplay { .. } => "mock-replay",
            Dialect::MockCentroidOracle => "mock-centroid-oracle",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    pub max_attempts: u32,
    pub base_delay_ms: u64,
    pub backoff_factor: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_attempts: 5,
            base_delay_ms: 1000,
            backoff_factor: 2.0,
        }
    }
}

impl RetryPolicy {
    /// Wait before retry number `n` (1-based): `base × factor^(n−1)`.
    pub fn delay(&self, n: u32) -> Duration {
        let ms = self.base_delay_ms as f64 * self.backoff_factor.powi(n.saturating_sub(1) as i32);
        Duration::from_millis(ms.round() as u64)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProviderConfig {
    pub dialect: Dialect,
    pub model_id: String,
    #[serde(default)]
    pub base_url: String,
    #[serde(default)]
    pub api_key_env: String,
    #[serde(default = "default_parallel")]
    pub max_parallel: usize,
    #[serde(default)]
    pub retry: RetryPolicy,
    #[serde(default = "default_context")]
    pub context_limit_tokens: u64,
    /// Completion tokens reserved in the context check and sent as the cap.
    #[serde(default = "default_completion")]
    pub max_completion_tokens: u64,
    #[serde(default)]
    pub temperature: f64,
    #[serde(default)]
    pub fail_fast: bool,
}

fn default_parallel() -> usize {
    4
}

fn default_context() -> u64 {
    16_384
}

fn default_completion() -> u64 {
    32
}

impl ProviderConfig {
    pub fn mock_oracle() -> Self {
        Self::new(Dialect::MockCentroidOracle, "mock-centroid-oracle")
    }

    pub fn mock_replay(path: impl Into<PathBuf>) -> Self {
        Self::new(Dialect::MockReplay { path: path.into() }, "mock-replay")
    }

    pub fn new(dialect: Dialect, model_id: &str) -> Self {
        ProviderConfig {
            dialect,
            model_id: model_id.to_string(),
            base_url: String::new(),
            api_key_env: String::new(),
            max_parallel: default_parallel(),
            retry: RetryPolicy::default(),
            context_limit_tokens: default_context(),
            max_completion_tokens: default_completion(),
            temperature: 0.0,
            fail_fast: false,
        }
    }

    pub fn validate(&self) -> Result<(), GatewayError> {
        if self.max_parallel == 0 {
            return Err(GatewayError::InvalidConfig("max_parallel must be >= 1".into()));
        }
        if self.context_limit_tokens == 0 {
            return Err(GatewayError::InvalidConfig("context_limit_tokens must be > 0".into()));
        }
        if self.retry.max_attempts == 0 {
            return Err(GatewayError::InvalidConfig("retry.max_attempts must be >= 1".into()));
        }
        Ok(())
    }
}

/// Text plus provider-reported `(prompt, completion)` counts when available.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawCompletion {
    pub text: String,
    pub usage: Option<(u64, u64)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CallError {
    /// Rate limit, transient server error, or timeout.
    Retryable(String),
    Fatal { status: u16, body: String },
    AuthMissing(String),
}

pub trait ChatBackend: Send + Sync {
    fn send(&self, bundle: &PromptBundle) -> Result<RawCompletion, CallError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompletionResult {
    pub raw_text: String,
    pub usage: UsageRecord,
    pub latency_ms: u64,
    pub attempt_count: u32,
}

pub struct Gateway {
    config: ProviderConfig,
    backend: Box<dyn ChatBackend>,
}

impl Gateway {
    pub fn new(config: ProviderConfig, backend: Box<dyn ChatBackend>) -> Result<Self, GatewayError> {
        config.validate()?;
        Ok(Gateway { config, backend })
    }

    pub fn config(&self) -> &ProviderConfig {
        &self.config
    }

    /// Pre-flight context check; nothing is sent when it fails.
    pub fn check_context(&self, bundle: &PromptBundle) -> Result<(), GatewayError> {
        if bundle.estimated_tokens + self.config.max_completion_tokens > self.config.context_limit_tokens {
            return Err(GatewayError::ContextOverflow {
                estimate: bundle.estimated_tokens,
                limit: self.config.context_limit_tokens,
            });
        }
        Ok(())
    }

    /// One call with retries. The returned usage carries an empty run id and
    /// call index 0; [`run_batch`] fills them in.
    pub fn complete(&self, bundle: &PromptBundle) -> Result<CompletionResult, GatewayError> {
        self.check_context(bundle)?;
        let started = Instant::now();
        let policy = &self.config.retry;
        let mut attempt = 0;
        loop {
            attempt += 1;
            match self.backend.send(bundle) {
                Ok(raw) => {
                    let (prompt_tokens, completion_tokens, estimated) = match raw.usage {
                        Some((p, c)) => (p, c, false),
                        None => {
                            let est = TokenEstimator::default();
                            (
                                bundle.estimated_tokens,
                                est.estimate_text(&raw.text).unwrap_or(0),
                                true,
                            )
                        }
                    };
                    return Ok(CompletionResult {
                        raw_text: raw.text,
                        usage: UsageRecord {
                            run_id: String::new(),
                            call_index: 0,
                            model_id: self.config.model_id.clone(),
                            prompt_tokens,
                            completion_tokens,
                            estimated,
                            attempts: attempt,
                            delivered: true,
                        },
                        latency_ms: started.elapsed().as_millis() as u64,
                        attempt_count: attempt,
                    });
                }
                Err(CallError::Retryable(message)) => {
                    if attempt >= policy.max_attempts {
                        return Err(GatewayError::RetriesExhausted {
                            attempts: attempt,
                            last_error: message,
                        });
                    }
                    std::thread::sleep(policy.delay(attempt));
                }
                Err(CallError::Fatal { status, body }) => {
                    return Err(GatewayError::ProviderError { status, body });
                }
                Err(CallError::AuthMissing(var)) => return Err(GatewayError::AuthMissing(var)),
            }
        }
    }
}

pub type ItemResult = Result<CompletionResult, GatewayError>;

fn attempts_of(error: &GatewayError) -> u32 {
    match error {
        GatewayError::RetriesExhausted { attempts, .. } => *attempts,
        GatewayError::ProviderError { .. } => 1,
        _ => 0,
    }
}

/// Runs every bundle with at most `max_parallel` calls in flight. Results
/// line up with `bundles`; each call is journaled in `ledger` under
/// `run_id` from a single collector. Item failures stay in their slot
/// unless the config asks for fail-fast.
pub fn run_batch(
    gateway: &Gateway,
    bundles: &[PromptBundle],
    run_id: &str,
    ledger: &mut Ledger,
) -> Result<Vec<ItemResult>, GatewayError> {
    ledger.begin_run(run_id);
    let mut results: Vec<Option<ItemResult>> = vec![None; bundles.len()];
    if bundles.is_empty() {
        return Ok(Vec::new());
    }
    let next = AtomicUsize::new(0);
    let abort = AtomicBool::new(false);
    let fail_fast = gateway.config.fail_fast;
    let mut first_failure: Option<(usize, GatewayError)> = None;
    let mut ledger_error = None;

    std::thread::scope(|scope| {
        let (tx, rx) = mpsc::channel::<(usize, ItemResult)>();
        let workers = gateway.config.max_parallel.min(bundles.len());
        for _ in 0..workers {
            let tx = tx.clone();
            let (next, abort) = (&next, &abort);
            scope.spawn(move || loop {
                if abort.load(Ordering::SeqCst) {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= bundles.len() {
                    break;
                }
                let result = gateway.complete(&bundles[i]);
                if result.is_err() && fail_fast {
                    abort.store(true, Ordering::SeqCst);
                }
                if tx.send((i, result)).is_err() {
                    break;
                }
            });
        }
        drop(tx);

        for (i, mut result) in rx {
            let record = match &mut result {
                Ok(done) => {
                    done.usage.run_id = run_id.to_string();
                    done.usage.call_index = i;
                    done.usage.clone()
                }
                Err(e) => {
                    if first_failure.as_ref().is_none_or(|(j, _)| i < *j) {
                        first_failure = Some((i, e.clone()));
                    }
                    UsageRecord {
                        run_id: run_id.to_string(),
                        call_index: i,
                        model_id: gateway.config.model_id.clone(),
                        prompt_tokens: 0,
                        completion_tokens: 0,
                        estimated: false,
                        attempts: attempts_of(e),
                        delivered: false,
                    }
                }
            };
            if let Err(e) = ledger.append(record) {
                ledger_error.get_or_insert(e);
            }
            results[i] = Some(result);
        }
    });

    ledger.flush()?;
    if let Some(e) = ledger_error {
        return Err(e.into());
    }
    if fail_fast {
        if let Some((index, error)) = first_failure {
            return Err(GatewayError::BatchAborted {
                index,
                error: error.to_string(),
            });
        }
    }
    Ok(results
        .into_iter()
        .map(|r| r.expect("every item reports when not aborted"))
        .collect())
}

/// Hex SHA-256 of a bundle's final user message; the replay lookup key.
pub fn replay_key(bundle: &PromptBundle) -> String {
    replay_key_for(bundle.final_user_text().unwrap_or_default())
}

pub fn replay_key_for(final_user_message: &str) -> String {
    hex::encode(Sha256::digest(final_user_message.as_bytes()))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReplayEntry {
    pub key: String,
    pub response: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fail_times: Option<u32>,
}

/// Serves recorded responses by final-user-message hash. An entry with
/// `fail_times = n` answers its first `n` requests with a transient error.
pub struct MockReplay {
    entries: HashMap<String, ReplayEntry>,
    remaining_failures: Mutex<HashMap<String, u32>>,
}

impl MockReplay {
    pub fn new(entries: impl IntoIterator<Item = ReplayEntry>) -> Self {
        let mut map = HashMap::new();
        let mut failures = HashMap::new();
        for entry in entries {
            if map.contains_key(&entry.key) {
                continue;
            }
            if let Some(n) = entry.fail_times.filter(|&n| n > 0) {
                failures.insert(entry.key.clone(), n);
            }
            map.insert(entry.key.clone(), entry);
        }
        MockReplay {
            entries: map,
            remaining_failures: Mutex::new(failures),
        }
    }

    pub fn load(path: &Path) -> std::io::Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut entries = Vec::new();
        for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: ReplayEntry = serde_json::from_str(&line).map_err(|e| {
                std::io::Error::new(std::io::ErrorKind::InvalidData, format!("line {}: {e}", i + 1))
            })?;
            entries.push(entry);
        }
        Ok(Self::new(entries))
    }

    pub fn save(entries: &[ReplayEntry], path: &Path) -> std::io::Result<()> {
        let mut body = String::new();
        for e in entries {
            let _ = writeln!(body, "{}", serde_json::to_string(e).expect("entry serializes"));
        }
        std::fs::write(path, body)
    }
}

impl ChatBackend for MockReplay {
    fn send(&self, bundle: &PromptBundle) -> Result<RawCompletion, CallError> {
        let key = replay_key(bundle);
        let entry = self.entries.get(&key).ok_or_else(|| CallError::Fatal {
            status: 404,
            body: format!("no replay entry for {key}"),
        })?;
        {
            let mut failures = self.remaining_failures.lock().expect("replay lock");
            if let Some(n) = failures.get_mut(&key).filter(|n| **n > 0) {
                *n -= 1;
                return Err(CallError::Retryable("scripted transient failure (503)".into()));
            }
        }
        Ok(RawCompletion {
            text: entry.response.clone(),
            usage: Some((entry.prompt_tokens, entry.completion_tokens)),
        })
    }
}

/// Answers `<index> <name>` of the nearest class centroid to the embedded
/// final user message. Reports no usage, so the ledger marks it estimated.
pub struct MockCentroidOracle {
    model: CentroidModel,
    embedder: Arc<dyn EmbeddingBackend>,
    cache: Arc<EmbeddingCache>,
}

impl MockCentroidOracle {
    pub fn new(model: CentroidModel, embedder: Arc<dyn EmbeddingBackend>, cache: Arc<EmbeddingCache>) -> Self {
        MockCentroidOracle { model, embedder, cache }
    }
}

impl ChatBackend for MockCentroidOracle {
    fn send(&self, bundle: &PromptBundle) -> Result<RawCompletion, CallError> {
        let query = bundle.final_user_text().unwrap_or_default().to_string();
        let fatal = |body: String| CallError::Fatal { status: 500, body };
        let vector = embed_batch(&[query], self.embedder.as_ref(), &self.cache, 1)
            .map_err(|e| fatal(e.to_string()))?
            .pop()
            .expect("one text in, one vector out");
        let (index, _) = self.model.predict(&vector).map_err(|e| fatal(e.to_string()))?;
        Ok(RawCompletion {
            text: format!("{index} {}", self.model.label_set().name(index)),
            usage: None,
        })
    }
}

/// Builds the request path and JSON body for a remote dialect.
pub fn encode_request(config: &ProviderConfig, bundle: &PromptBundle) -> Option<(&'static str, Value)> {
    let role = |r: Role| match r {
        Role::System => "system",
        Role::User => "user",
        Role::Assistant => "assistant",
    };
    match config.dialect {
        Dialect::OpenaiChat => {
            let messages: Vec<Value> = bundle
                .messages
                .iter()
                .map(|m| json!({"role": role(m.role), "content": m.content}))
                .collect();
            Some((
                "/v1/chat/completions",
                json!({
                    "model": config.model_id,
                    "messages": messages,
                    "temperature": config.temperature,
                    "max_tokens": config.max_completion_tokens,
                    "stop": ["\n"],
                }),
            ))
        }
        Dialect::AnthropicMessages => {
            let system: Vec<&str> = bundle
                .messages
                .iter()
                .filter(|m| m.role == Role::System)
                .map(|m| m.content.as_str())
                .collect();
            let messages: Vec<Value> = bundle
                .messages
                .iter()
                .filter(|m| m.role != Role::System)
                .map(|m| json!({"role": role(m.role), "content": m.content}))
                .collect();
            Some((
                "/v1/messages",
                json!({
                    "model": config.model_id,
                    "system": system.join("\n\n"),
                    "messages": messages,
                    "temperature": config.temperature,
                    "max_tokens": config.max_completion_tokens,
                    "stop_sequences": ["\n"],
                }),
            ))
        }
        Dialect::CohereGenerate => {
            let mut prompt = String::new();
            for m in &bundle.messages {
                match m.role {
                    Role::System => prompt.push_str(&m.content),
                    Role::User => {
                        let _ = write!(prompt, "\n\nUser: {}", m.content);
                    }
                    Role::Assistant => {
                        let _ = write!(prompt, "\nAssistant: {}", m.content);
                    }
                }
            }
            prompt.push_str("\nAssistant:");
            Some((
                "/v1/generate",
                json!({
                    "model": config.model_id,
                    "prompt": prompt,
                    "temperature": config.temperature,
                    "max_tokens": config.max_completion_tokens,
                    "stop_sequences": ["\n"],
                }),
            ))
        }
        Dialect::MockReplay { .. } | Dialect::MockCentroidOracle => None,
    }
}

/// Extracts text and usage counts from a successful remote response.
pub fn decode_response(dialect: &Dialect, body: &Value) -> Option<RawCompletion> {
    let counts = |p: &Value, c: &Value| p.as_u64().zip(c.as_u64());
    match dialect {
        Dialect::OpenaiChat => Some(RawCompletion {
            text: body["choices"][0]["message"]["content"].as_str()?.trim().to_string(),
            usage: counts(&body["usage"]["prompt_tokens"], &body["usage"]["completion_tokens"]),
        }),
        Dialect::AnthropicMessages => Some(RawCompletion {
            text: body["content"][0]["text"].as_str()?.trim().to_string(),
            usage: counts(&body["usage"]["input_tokens"], &body["usage"]["output_tokens"]),
        }),
        Dialect::CohereGenerate => {
            let units = &body["meta"]["billed_units"];
            Some(RawCompletion {
                text: body["generations"][0]["text"].as_str()?.trim().to_string(),
                usage: counts(&units["input_tokens"], &units["output_tokens"]),
            })
        }
        Dialect::MockReplay { .. } | Dialect::MockCentroidOracle => None,
    }
}

/// Whether an HTTP status should be retried.
pub fn is_retryable_status(status: u16) -> bool {
    status == 408 || status == 429 || (500..600).contains(&status)
}

pub struct HttpBackend {
    config: ProviderConfig,
    client: reqwest::blocking::Client,
}

impl HttpBackend {
    pub fn new(config: ProviderConfig) -> Result<Self, GatewayError> {
        if !config.dialect.is_remote() {
            return Err(GatewayError::InvalidConfig(format!(
                "{} is not a remote dialect",
                config.dialect.name()
            )));
        }
        if std::env::var_os(&config.api_key_env).is_none() {
            return Err(GatewayError::AuthMissing(config.api_key_env.clone()));
        }
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| GatewayError::InvalidConfig(e.to_string()))?;
        Ok(HttpBackend { config, client })
    }
}

impl ChatBackend for HttpBackend {
    fn send(&self, bundle: &PromptBundle) -> Result<RawCompletion, CallError> {
        let key = std::env::var(&self.config.api_key_env)
            .map_err(|_| CallError::AuthMissing(self.config.api_key_env.clone()))?;
        let (path, body) = encode_request(&self.config, bundle).expect("remote dialect");
        let url = format!("{}{path}", self.config.base_url.trim_end_matches('/'));
        let mut request = self.client.post(url).json(&body);
        request = match self.config.dialect {
            Dialect::AnthropicMessages => request
                .header("x-api-key", key)
                .header("anthropic-version", "2023-06-01"),
            _ => request.bearer_auth(key),
        };
        let response = request.send().map_err(|e| CallError::Retryable(e.to_string()))?;
        let status = response.status().as_u16();
        let text = response.text().map_err(|e| CallError::Retryable(e.to_string()))?;
        if is_retryable_status(status) {
            return Err(CallError::Retryable(format!("{status}: {text}")));
        }
        if !(200..300).contains(&status) {
            return Err(CallError::Fatal { status, body: text });
        }
        let value: Value = serde_json::from_str(&text).map_err(|e| CallError::Fatal {
            status,
            body: format!("undecodable body ({e}): {text}"),
        })?;
        decode_response(&self.config.dialect, &value).ok_or(CallError::Fatal {
            status,
            body: format!("unexpected response shape: {text}"),
        })
    }
}
