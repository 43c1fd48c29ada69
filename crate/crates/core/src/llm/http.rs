//! Blocking chat-completions client with bounded retries.

use std::collections::BTreeMap;
use std::thread;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};

use super::{ChatMessage, ChatRole, LlmBackend, LlmError, LlmRequest, LlmResponse, OpTag, Usage};

pub const ENV_ENDPOINT: &str = "DIAGSYNTH_ENDPOINT";
pub const ENV_MODEL: &str = "DIAGSYNTH_MODEL";
pub const ENV_API_KEY: &str = "DIAGSYNTH_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    /// Base URL such as `http://localhost:8000/v1`; `/chat/completions` is appended.
    pub endpoint: String,
    pub model: String,
    #[serde(default, skip_serializing)]
    pub api_key: Option<String>,
    /// Per-operation model names overriding `model`.
    #[serde(default)]
    pub model_overrides: BTreeMap<OpTag, String>,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_timeout")]
    pub timeout_secs: u64,
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

fn default_retries() -> u32 {
    3
}

fn default_timeout() -> u64 {
    60
}

fn default_backoff() -> u64 {
    500
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key: None,
            model_overrides: BTreeMap::new(),
            max_retries: default_retries(),
            timeout_secs: default_timeout(),
            backoff_ms: default_backoff(),
        }
    }

    /// Reads endpoint, model and key from the environment.
    pub fn from_env() -> Result<Self, LlmError> {
        let endpoint =
            std::env::var(ENV_ENDPOINT).map_err(|_| LlmError::Config(format!("{ENV_ENDPOINT} is not set")))?;
        let model = std::env::var(ENV_MODEL).map_err(|_| LlmError::Config(format!("{ENV_MODEL} is not set")))?;
        let mut cfg = HttpConfig::new(endpoint, model);
        cfg.api_key = std::env::var(ENV_API_KEY).ok();
        Ok(cfg)
    }

    pub fn url(&self) -> String {
        let base = self.endpoint.trim_end_matches('/');
        if base.ends_with("/chat/completions") {
            base.to_string()
        } else {
            format!("{base}/chat/completions")
        }
    }

    pub fn model_for(&self, op: OpTag) -> &str {
        self.model_overrides.get(&op).unwrap_or(&self.model)
    }
}

// Field order here is the wire order.
#[derive(Serialize)]
struct WireRequest<'a> {
    model: &'a str,
    messages: Vec<WireMessage<'a>>,
    temperature: f32,
    max_tokens: u32,
    stream: bool,
}

#[derive(Serialize)]
struct WireMessage<'a> {
    role: ChatRole,
    content: &'a str,
}

#[derive(Deserialize)]
struct WireResponse {
    choices: Vec<WireChoice>,
    #[serde(default)]
    usage: Option<WireUsage>,
}

#[derive(Deserialize)]
struct WireChoice {
    message: WireResponseMessage,
}

#[derive(Deserialize)]
struct WireResponseMessage {
    #[serde(default)]
    content: Option<String>,
}

#[derive(Deserialize)]
struct WireUsage {
    #[serde(default)]
    prompt_tokens: u32,
    #[serde(default)]
    completion_tokens: u32,
    #[serde(default)]
    total_tokens: u32,
}

pub struct HttpBackend {
    config: HttpConfig,
    client: reqwest::blocking::Client,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("url", &self.config.url())
            .field("model", &self.config.model)
            .finish()
    }
}

enum Attempt {
    Done(LlmResponse),
    Retry(String),
    Fatal(LlmError),
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Result<Self, LlmError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| LlmError::Config(format!("cannot build HTTP client: {e}")))?;
        Ok(Self { config, client })
    }

    pub fn config(&self) -> &HttpConfig {
        &self.config
    }

    /// Serialized request body. Equal requests give equal bytes.
    pub fn request_body(&self, request: &LlmRequest) -> Vec<u8> {
        let mut messages = Vec::with_capacity(request.messages.len() + 1);
        if !request.system_prompt.is_empty() {
            messages.push(WireMessage {
                role: ChatRole::System,
                content: &request.system_prompt,
            });
        }
        messages.extend(request.messages.iter().map(|m: &ChatMessage| WireMessage {
            role: m.role,
            content: &m.content,
        }));
        let wire = WireRequest {
            model: self.config.model_for(request.op_tag),
            messages,
            temperature: request.temperature,
            max_tokens: request.max_tokens,
            stream: false,
        };
        serde_json::to_vec(&wire).expect("request serializes")
    }

    fn attempt(&self, body: &[u8], started: Instant) -> Attempt {
        let mut builder = self
            .client
            .post(self.config.url())
            .header(reqwest::header::CONTENT_TYPE, "application/json")
            .body(body.to_vec());
        if let Some(key) = &self.config.api_key {
            builder = builder.bearer_auth(key);
        }
        let response = match builder.send() {
            Ok(r) => r,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        let status = response.status();
        let text = match response.text() {
            Ok(t) => t,
            Err(e) => return Attempt::Retry(e.to_string()),
        };
        if status.is_success() {
            return match serde_json::from_str::<WireResponse>(&text) {
                Ok(wire) => {
                    let content = wire.choices.into_iter().next().and_then(|c| c.message.content);
                    match content {
                        Some(text) => {
                            let usage = wire.usage.map_or(Usage::default(), |u| Usage {
                                prompt_tokens: u.prompt_tokens,
                                completion_tokens: u.completion_tokens,
                                total_tokens: u.total_tokens,
                            });
                            Attempt::Done(LlmResponse {
                                text,
                                usage,
                                latency_ms: started.elapsed().as_millis() as u64,
                            })
                        }
                        None => Attempt::Fatal(LlmError::Decode("response has no message content".into())),
                    }
                }
                Err(e) => Attempt::Fatal(LlmError::Decode(e.to_string())),
            };
        }
        let code = status.as_u16();
        if status.is_server_error() || code == 429 || code == 408 {
            Attempt::Retry(format!("status {code}: {}", truncate(&text)))
        } else {
            Attempt::Fatal(LlmError::Status {
                status: code,
                body: truncate(&text),
            })
        }
    }
}

fn truncate(s: &str) -> String {
    s.chars().take(200).collect()
}

impl LlmBackend for HttpBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        let body = self.request_body(request);
        let started = Instant::now();
        let mut last = String::new();
        let attempts = self.config.max_retries + 1;
        for attempt in 0..attempts {
            if attempt > 0 {
                let wait = self.config.backoff_ms.saturating_mul(1 << (attempt - 1).min(16));
                thread::sleep(Duration::from_millis(wait));
            }
            match self.attempt(&body, started) {
                Attempt::Done(resp) => return Ok(resp),
                Attempt::Fatal(err) => return Err(err),
                Attempt::Retry(msg) => {
                    log::warn!("{} attempt {} failed: {msg}", request.op_tag, attempt + 1);
                    last = msg;
                }
            }
        }
        Err(LlmError::Transport {
            attempts,
            message: last,
        })
    }
}
