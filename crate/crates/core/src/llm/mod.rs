//! Uniform completion interface over language models.
//!
//! Two backends implement [`LlmBackend`]: [`HttpBackend`] speaks the
//! chat-completions wire format, and [`ScriptedBackend`] replays responses
//! from a table keyed by operation and call index.

mod http;
mod parse;
mod scripted;

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use http::{HttpBackend, HttpConfig, ENV_API_KEY, ENV_ENDPOINT, ENV_MODEL};
pub use parse::{parse_boolean, parse_topic_list, AmbiguousVerdict};
pub use scripted::{Script, ScriptedBackend};

/// The operation a request is issued for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum OpTag {
    DocGen,
    PatGen,
    EmpathGen,
    IsTopicEnd,
    ParseExp,
    DupDetect,
    TriggerExp,
    FicExpGen,
    PromptGen,
}

impl OpTag {
    pub const ALL: [OpTag; 9] = [
        OpTag::DocGen,
        OpTag::PatGen,
        OpTag::EmpathGen,
        OpTag::IsTopicEnd,
        OpTag::ParseExp,
        OpTag::DupDetect,
        OpTag::TriggerExp,
        OpTag::FicExpGen,
        OpTag::PromptGen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpTag::DocGen => "DocGen",
            OpTag::PatGen => "PatGen",
            OpTag::EmpathGen => "EmpathGen",
            OpTag::IsTopicEnd => "IsTopicEnd",
            OpTag::ParseExp => "ParseExp",
            OpTag::DupDetect => "DupDetect",
            OpTag::TriggerExp => "TriggerExp",
            OpTag::FicExpGen => "FicExpGen",
            OpTag::PromptGen => "PromptGen",
        }
    }

    /// Yes/no judgements with a short answer budget.
    pub fn is_verdict(self) -> bool {
        matches!(self, OpTag::IsTopicEnd | OpTag::TriggerExp)
    }

    /// Controller operations, run at the verdict temperature.
    pub fn is_tool(self) -> bool {
        matches!(
            self,
            OpTag::IsTopicEnd | OpTag::TriggerExp | OpTag::ParseExp | OpTag::DupDetect | OpTag::PromptGen
        )
    }
}

impl fmt::Display for OpTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChatRole {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: ChatRole,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: ChatRole::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LlmRequest {
    pub op_tag: OpTag,
    pub system_prompt: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f32,
    pub max_tokens: u32,
}

impl LlmRequest {
    pub fn validate(&self) -> Result<(), LlmError> {
        if self.messages.is_empty() {
            return Err(LlmError::InvalidRequest("messages must be non-empty".into()));
        }
        if !(0.0..=2.0).contains(&self.temperature) {
            return Err(LlmError::InvalidRequest(format!(
                "temperature {} outside [0, 2]",
                self.temperature
            )));
        }
        Ok(())
    }

    /// All prompt text, system prompt first.
    pub fn full_text(&self) -> String {
        let mut out = self.system_prompt.clone();
        for m in &self.messages {
            out.push('\n');
            out.push_str(&m.content);
        }
        out
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u32,
    pub completion_tokens: u32,
    pub total_tokens: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LlmResponse {
    pub text: String,
    pub usage: Usage,
    pub latency_ms: u64,
}

impl LlmResponse {
    pub fn text(text: impl Into<String>) -> Self {
        Self {
            text: text.into(),
            usage: Usage::default(),
            latency_ms: 0,
        }
    }
}

/// Temperature and length limits per operation kind.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SamplingConfig {
    pub generative_temperature: f32,
    pub verdict_temperature: f32,
    pub max_tokens: u32,
    pub verdict_max_tokens: u32,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        Self {
            generative_temperature: 0.8,
            verdict_temperature: 0.0,
            max_tokens: 1024,
            verdict_max_tokens: 16,
        }
    }
}

impl SamplingConfig {
    /// Builds a single-message request with the limits for `op`.
    pub fn request(&self, op: OpTag, system_prompt: String, user: String) -> LlmRequest {
        let temperature = if op.is_tool() {
            self.verdict_temperature
        } else {
            self.generative_temperature
        };
        let max_tokens = if op.is_verdict() {
            self.verdict_max_tokens
        } else {
            self.max_tokens
        };
        LlmRequest {
            op_tag: op,
            system_prompt,
            messages: vec![ChatMessage::user(user)],
            temperature,
            max_tokens,
        }
    }
}

#[derive(Debug, Clone, thiserror::Error, PartialEq, Eq)]
pub enum LlmError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport error after {attempts} attempt(s): {message}")]
    Transport { attempts: u32, message: String },
    #[error("endpoint returned status {status}: {body}")]
    Status { status: u16, body: String },
    #[error("cannot decode completion: {0}")]
    Decode(String),
    #[error("script exhausted for op_tag {0}")]
    ScriptExhausted(OpTag),
    #[error("backend configuration: {0}")]
    Config(String),
}

/// A completion backend. Implementations are shared across sessions.
pub trait LlmBackend: Send + Sync {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError>;
}

impl<T: LlmBackend + ?Sized> LlmBackend for Arc<T> {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        (**self).complete(request)
    }
}

/// Hands each session the backend it should talk to.
///
/// Network backends hand out the same shared client; scripted backends hand
/// out a fresh replay cursor so concurrent sessions stay replay-exact.
pub trait BackendSource: Send + Sync {
    fn session_backend(&self) -> Arc<dyn LlmBackend>;
}

/// Every session shares one backend instance.
#[derive(Clone)]
pub struct SharedBackend(pub Arc<dyn LlmBackend>);

impl BackendSource for SharedBackend {
    fn session_backend(&self) -> Arc<dyn LlmBackend> {
        Arc::clone(&self.0)
    }
}

impl BackendSource for Script {
    fn session_backend(&self) -> Arc<dyn LlmBackend> {
        Arc::new(ScriptedBackend::new(self.clone()))
    }
}
