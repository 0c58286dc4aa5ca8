//! Chat-completion transports and the retry loop.
//!
//! Wire format (HTTP): `POST {base_url}/chat/completions` with
//! `Authorization: Bearer <key>` and body
//!
//! ```json
//! {"model": "...", "temperature": 1.0, "max_tokens": 512,
//!  "messages": [{"role": "system", "content": "..."},
//!               {"role": "user", "content": "..."}]}
//! ```
//!
//! (`max_tokens` only when configured). The reply text is read from
//! `choices[0].message.content`, usage from `usage.prompt_tokens` and
//! `usage.completion_tokens` when present.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use super::dataset::SampleId;
use crate::compression::SplitMix64;

pub const DEFAULT_API_KEY_ENV: &str = "SALIENT_API_KEY";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TransportKind {
    #[default]
    Http,
    Replay,
}

fn default_temperature() -> f64 {
    1.0
}
fn default_max_retries() -> u32 {
    3
}
fn default_timeout() -> u64 {
    60
}
fn default_api_key_env() -> String {
    DEFAULT_API_KEY_ENV.to_string()
}
fn default_parallelism() -> usize {
    4
}
fn default_retry_base_ms() -> u64 {
    1000
}

/// Endpoint settings, usually read from a TOML file. The API key itself is
/// never stored; only the name of the environment variable holding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EndpointConfig {
    #[serde(default)]
    pub base_url: String,
    pub model_name: String,
    #[serde(default = "default_api_key_env")]
    pub api_key_env: String,
    #[serde(default = "default_temperature")]
    pub temperature: f64,
    #[serde(default = "default_max_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default)]
    pub max_tokens: Option<u32>,
    #[serde(default)]
    pub transport: TransportKind,
    /// Replay file, for `transport = "replay"`.
    #[serde(default)]
    pub replay: Option<PathBuf>,
    /// Maximum in-flight requests.
    #[serde(default = "default_parallelism")]
    pub parallelism: usize,
    /// First backoff delay; later ones double.
    #[serde(default = "default_retry_base_ms")]
    pub retry_base_ms: u64,
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("endpoint config: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("endpoint config: {0}")]
    Invalid(String),
    #[error("environment variable {0} with the API key is not set")]
    MissingApiKey(String),
    #[error("http client: {0}")]
    Client(String),
}

impl EndpointConfig {
    pub fn replay(model_name: &str, path: impl Into<PathBuf>) -> Self {
        EndpointConfig {
            base_url: String::new(),
            model_name: model_name.to_string(),
            api_key_env: default_api_key_env(),
            temperature: default_temperature(),
            max_retries: default_max_retries(),
            timeout_secs: default_timeout(),
            max_tokens: None,
            transport: TransportKind::Replay,
            replay: Some(path.into()),
            parallelism: default_parallelism(),
            retry_base_ms: default_retry_base_ms(),
        }
    }

    pub fn parse(contents: &str) -> Result<Self, ConfigError> {
        let cfg: EndpointConfig = toml::from_str(contents)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        let contents = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        EndpointConfig::parse(&contents)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ConfigError::Invalid(format!("temperature {} must be >= 0", self.temperature)));
        }
        if self.parallelism == 0 {
            return Err(ConfigError::Invalid("parallelism must be at least 1".into()));
        }
        match self.transport {
            TransportKind::Http if self.base_url.is_empty() => {
                Err(ConfigError::Invalid("http transport needs base_url".into()))
            }
            TransportKind::Replay if self.replay.is_none() => {
                Err(ConfigError::Invalid("replay transport needs a replay file".into()))
            }
            _ => Ok(()),
        }
    }

    pub fn api_key(&self) -> Result<String, ConfigError> {
        match std::env::var(&self.api_key_env) {
            Ok(key) if !key.is_empty() => Ok(key),
            _ => Err(ConfigError::MissingApiKey(self.api_key_env.clone())),
        }
    }

    pub fn retry_policy(&self) -> RetryPolicy {
        RetryPolicy {
            max_retries: self.max_retries,
            base: Duration::from_millis(self.retry_base_ms),
            ..RetryPolicy::default()
        }
    }
}

/// One request; `method` and `k` identify the prompt variant for replay.
#[derive(Debug, Clone, PartialEq)]
pub struct CompletionRequest {
    pub sample_id: SampleId,
    pub method: String,
    pub k: u32,
    pub system: String,
    pub user: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Completion {
    pub text: String,
    pub input_tokens: Option<u64>,
    pub output_tokens: Option<u64>,
}

#[derive(Debug, Clone, Error, PartialEq)]
pub enum TransportError {
    #[error("transient failure{}: {message}", status.map(|s| format!(" (HTTP {s})")).unwrap_or_default())]
    Transient { status: Option<u16>, message: String },
    #[error("authentication rejected (HTTP {0})")]
    Auth(u16),
    #[error("request rejected (HTTP {status}): {body}")]
    Rejected { status: u16, body: String },
    #[error("malformed response: {0}")]
    Decode(String),
    #[error("no replay entry for id {id}, method {method}, k {k}")]
    ReplayMiss { id: String, method: String, k: u32 },
    #[error("gave up after {attempts} attempts: {last}")]
    Exhausted { attempts: u32, last: Box<TransportError> },
}

impl TransportError {
    pub fn is_transient(&self) -> bool {
        matches!(self, TransportError::Transient { .. })
    }
}

pub trait Transport: Sync {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetryPolicy {
    pub max_retries: u32,
    pub base: Duration,
    pub factor: f64,
    /// Each delay is scaled by a uniform factor in `1 +- jitter`.
    pub jitter: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy {
            max_retries: 3,
            base: Duration::from_secs(1),
            factor: 2.0,
            jitter: 0.25,
        }
    }
}

impl RetryPolicy {
    /// Delay before retry number `retry` (0-based).
    pub fn delay(&self, retry: u32, rng: &mut SplitMix64) -> Duration {
        let unit = (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
        let scale = 1.0 + self.jitter * (2.0 * unit - 1.0);
        self.base.mul_f64(self.factor.powi(retry as i32) * scale)
    }
}

/// Outcome of a request together with the number of retries spent on it.
#[derive(Debug, Clone, PartialEq)]
pub struct Attempted {
    pub result: Result<Completion, TransportError>,
    pub retries: u32,
}

/// Sends `request`, retrying transient failures with exponential backoff.
/// `sleep` is injected so tests can run without waiting.
pub fn complete_with_retry(
    transport: &dyn Transport,
    request: &CompletionRequest,
    policy: &RetryPolicy,
    seed: u64,
    sleep: &dyn Fn(Duration),
) -> Attempted {
    let mut rng = SplitMix64::new(seed);
    let mut retries = 0;
    loop {
        match transport.complete(request) {
            Ok(c) => return Attempted { result: Ok(c), retries },
            Err(e) if e.is_transient() && retries < policy.max_retries => {
                sleep(policy.delay(retries, &mut rng));
                retries += 1;
            }
            Err(e) if e.is_transient() => {
                return Attempted {
                    result: Err(TransportError::Exhausted {
                        attempts: retries + 1,
                        last: Box::new(e),
                    }),
                    retries,
                }
            }
            Err(e) => return Attempted { result: Err(e), retries },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReplayRecord {
    pub id: SampleId,
    pub method: String,
    pub k: u32,
    pub response: String,
    #[serde(default)]
    pub input_tokens: Option<u64>,
    #[serde(default)]
    pub output_tokens: Option<u64>,
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("replay line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Method name used for the uncompressed prompt.
pub const FULL_METHOD: &str = "full";

/// Canned responses keyed by `(id, method, k)`. A `k = 100` request falls
/// back to the `(id, "full", 100)` entry, since every method sends the
/// original prompt at full retention.
#[derive(Debug, Clone, Default)]
pub struct ReplayTransport {
    entries: HashMap<(SampleId, String, u32), Completion>,
}

impl ReplayTransport {
    pub fn parse(contents: &str) -> Result<Self, ReplayError> {
        let mut entries = HashMap::new();
        for (i, raw) in contents.lines().enumerate() {
            if raw.trim().is_empty() {
                continue;
            }
            let r: ReplayRecord = serde_json::from_str(raw).map_err(|e| ReplayError::Parse {
                line: i + 1,
                message: e.to_string(),
            })?;
            entries.insert(
                (r.id, r.method, r.k),
                Completion {
                    text: r.response,
                    input_tokens: r.input_tokens,
                    output_tokens: r.output_tokens,
                },
            );
        }
        Ok(ReplayTransport { entries })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ReplayError> {
        let path = path.as_ref();
        let contents = std::fs::read_to_string(path).map_err(|source| ReplayError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        ReplayTransport::parse(&contents)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl Transport for ReplayTransport {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, TransportError> {
        let key = (request.sample_id.clone(), request.method.clone(), request.k);
        self.entries
            .get(&key)
            .or_else(|| {
                (request.k == 100)
                    .then(|| self.entries.get(&(request.sample_id.clone(), FULL_METHOD.to_string(), 100)))
                    .flatten()
            })
            .cloned()
            .ok_or_else(|| TransportError::ReplayMiss {
                id: request.sample_id.to_string(),
                method: request.method.clone(),
                k: request.k,
            })
    }
}

pub struct HttpTransport {
    client: reqwest::blocking::Client,
    url: String,
    api_key: String,
    model: String,
    temperature: f64,
    max_tokens: Option<u32>,
}

impl HttpTransport {
    /// Fails before any request if the API key is missing.
    pub fn new(cfg: &EndpointConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let api_key = cfg.api_key()?;
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(cfg.timeout_secs))
            .build()
            .map_err(|e| ConfigError::Client(e.to_string()))?;
        Ok(HttpTransport {
            client,
            url: format!("{}/chat/completions", cfg.base_url.trim_end_matches('/')),
            api_key,
            model: cfg.model_name.clone(),
            temperature: cfg.temperature,
            max_tokens: cfg.max_tokens,
        })
    }

    pub fn request_body(&self, request: &CompletionRequest) -> serde_json::Value {
        let mut body = json!({
            "model": self.model,
            "temperature": self.temperature,
            "messages": [
                {"role": "system", "content": request.system},
                {"role": "user", "content": request.user},
            ],
        });
        if let Some(m) = self.max_tokens {
            body["max_tokens"] = json!(m);
        }
        body
    }
}

/// Maps an HTTP status and body to a completion or a classified error.
pub fn interpret_response(status: u16, body: &str) -> Result<Completion, TransportError> {
    match status {
        200..=299 => {}
        401 | 403 => return Err(TransportError::Auth(status)),
        408 | 429 | 500..=599 => {
            return Err(TransportError::Transient {
                status: Some(status),
                message: body.chars().take(200).collect(),
            })
        }
        _ => {
            return Err(TransportError::Rejected {
                status,
                body: body.chars().take(200).collect(),
            })
        }
    }
    let v: serde_json::Value = serde_json::from_str(body).map_err(|e| TransportError::Decode(e.to_string()))?;
    let text = v["choices"][0]["message"]["content"]
        .as_str()
        .ok_or_else(|| TransportError::Decode("missing choices[0].message.content".into()))?
        .to_string();
    Ok(Completion {
        text,
        input_tokens: v["usage"]["prompt_tokens"].as_u64(),
        output_tokens: v["usage"]["completion_tokens"].as_u64(),
    })
}

impl Transport for HttpTransport {
    fn complete(&self, request: &CompletionRequest) -> Result<Completion, TransportError> {
        let response = self
            .client
            .post(&self.url)
            .bearer_auth(&self.api_key)
            .json(&self.request_body(request))
            .send()
            .map_err(|e| TransportError::Transient {
                status: None,
                message: e.to_string(),
            })?;
        let status = response.status().as_u16();
        let body = response.text().map_err(|e| TransportError::Transient {
            status: None,
            message: e.to_string(),
        })?;
        interpret_response(status, &body)
    }
}
