use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::{LlmBackend, LlmError, LlmRequest, LlmResponse, OpTag};
use crate::error::{read_config, ConfigError};

/// Response table for [`ScriptedBackend`].
///
/// `responses[op][i]` answers the i-th call issued for `op`. Once a list is
/// used up the optional `fallback[op]` answers every further call; without a
/// fallback the call fails.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Script {
    #[serde(default)]
    pub responses: BTreeMap<OpTag, Vec<String>>,
    #[serde(default)]
    pub fallback: BTreeMap<OpTag, String>,
}

impl Script {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, op: OpTag, responses: &[&str]) -> Self {
        self.responses
            .entry(op)
            .or_default()
            .extend(responses.iter().map(|r| r.to_string()));
        self
    }

    pub fn push(&mut self, op: OpTag, response: impl Into<String>) {
        self.responses.entry(op).or_default().push(response.into());
    }

    pub fn with_fallback(mut self, op: OpTag, response: &str) -> Self {
        self.fallback.insert(op, response.to_string());
        self
    }

    pub fn from_toml_str(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = read_config(path)?;
        Script::from_toml_str(&text).map_err(|e| ConfigError::parse(path, e))
    }
}

/// Deterministic table-driven backend. Records every request it receives.
#[derive(Debug)]
pub struct ScriptedBackend {
    script: Script,
    state: Mutex<State>,
}

#[derive(Debug, Default)]
struct State {
    cursors: BTreeMap<OpTag, usize>,
    requests: Vec<LlmRequest>,
}

impl ScriptedBackend {
    pub fn new(script: Script) -> Self {
        Self {
            script,
            state: Mutex::new(State::default()),
        }
    }

    /// Requests seen so far, in call order.
    pub fn requests(&self) -> Vec<LlmRequest> {
        self.state.lock().expect("script state poisoned").requests.clone()
    }

    pub fn calls(&self, op: OpTag) -> usize {
        self.state
            .lock()
            .expect("script state poisoned")
            .cursors
            .get(&op)
            .copied()
            .unwrap_or(0)
    }
}

impl LlmBackend for ScriptedBackend {
    fn complete(&self, request: &LlmRequest) -> Result<LlmResponse, LlmError> {
        request.validate()?;
        let mut state = self.state.lock().expect("script state poisoned");
        state.requests.push(request.clone());
        let op = request.op_tag;
        let index = *state.cursors.get(&op).unwrap_or(&0);
        state.cursors.insert(op, index + 1);
        let text = self
            .script
            .responses
            .get(&op)
            .and_then(|list| list.get(index))
            .or_else(|| self.script.fallback.get(&op))
            .ok_or(LlmError::ScriptExhausted(op))?;
        Ok(LlmResponse::text(text.clone()))
    }
}
