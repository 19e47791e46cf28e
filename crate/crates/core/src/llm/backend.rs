//! Chat-completion backends: a deterministic mock and an OpenAI-style HTTP client.

use std::collections::HashMap;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::prompt::find_action_line;
use super::{ChatMessage, Sender};
use crate::repr::parse_action_line;

pub const ENV_ENDPOINT: &str = "BREX_LLM_ENDPOINT";
pub const ENV_API_KEY: &str = "BREX_LLM_API_KEY";
pub const ENV_MODEL: &str = "BREX_LLM_MODEL";
pub const ENV_TEMPERATURE: &str = "BREX_LLM_TEMPERATURE";

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("backend failed after {attempts} attempt(s): {message}")]
pub struct BackendError {
    pub message: String,
    pub attempts: u32,
    /// Whether retrying later may succeed.
    pub retriable: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendMetadata {
    pub model: String,
    pub temperature: f64,
}

pub trait LlmBackend: Send + Sync {
    /// Assistant reply to the full message history.
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError>;
    fn metadata(&self) -> BackendMetadata;
}

pub fn message_key(text: &str) -> String {
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Replies from a script keyed by the sha256 of the last user message, or from
/// a template built around the action line found in the conversation.
#[derive(Debug, Clone, Default)]
pub struct MockBackend {
    script: HashMap<String, String>,
}

impl MockBackend {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_script(script: HashMap<String, String>) -> Self {
        Self { script }
    }

    pub fn with_reply(mut self, user_text: &str, reply: &str) -> Self {
        self.script.insert(message_key(user_text), reply.to_string());
        self
    }

    fn template(messages: &[ChatMessage], last: &str) -> String {
        let action = messages
            .iter()
            .rev()
            .filter(|m| m.sender == Sender::User)
            .find_map(|m| find_action_line(&m.text))
            .unwrap_or("");
        let role = parse_action_line(action).map(|(r, _, _)| r.name()).unwrap_or("agent");
        if last.contains("\"ANSWER: \"") {
            format!("ANSWER: {action}\nREASON: The {role} keeps pursuing the goal described in the explanation.")
        } else if last.trim_end().ends_with("Explanation:") {
            format!(
                "The {}, as the features it looked at point to this action.",
                action.trim_end_matches('.')
            )
        } else {
            format!("The {role} would still choose \"{action}\" given the features it looked at. (Reply to: {last})")
        }
    }
}

impl LlmBackend for MockBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let last = messages
            .iter()
            .rev()
            .find(|m| m.sender == Sender::User)
            .map(|m| m.text.as_str())
            .unwrap_or("");
        Ok(match self.script.get(&message_key(last)) {
            Some(reply) => reply.clone(),
            None => Self::template(messages, last),
        })
    }

    fn metadata(&self) -> BackendMetadata {
        BackendMetadata {
            model: "mock".into(),
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HttpConfig {
    pub endpoint: String,
    #[serde(skip_serializing)]
    pub api_key: Option<String>,
    pub model: String,
    pub temperature: f64,
    pub timeout_secs: u64,
    pub max_attempts: u32,
    pub backoff_ms: u64,
}

impl HttpConfig {
    pub fn new(endpoint: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            endpoint: endpoint.into(),
            api_key: None,
            model: model.into(),
            temperature: 0.0,
            timeout_secs: 120,
            max_attempts: 2,
            backoff_ms: 500,
        }
    }

    pub fn from_env() -> Result<Self, BackendError> {
        let var = |k: &str| std::env::var(k).ok().filter(|v| !v.is_empty());
        let endpoint = var(ENV_ENDPOINT).ok_or_else(|| BackendError {
            message: format!("{ENV_ENDPOINT} is not set"),
            attempts: 0,
            retriable: false,
        })?;
        let mut cfg = Self::new(endpoint, var(ENV_MODEL).unwrap_or_else(|| "gpt-4".into()));
        cfg.api_key = var(ENV_API_KEY);
        if let Some(t) = var(ENV_TEMPERATURE) {
            cfg.temperature = t.parse().map_err(|_| BackendError {
                message: format!("{ENV_TEMPERATURE} is not a number: {t}"),
                attempts: 0,
                retriable: false,
            })?;
        }
        Ok(cfg)
    }
}

/// Chat-completions client. Retries transient failures with exponential backoff.
#[derive(Debug, Clone)]
pub struct HttpBackend {
    pub config: HttpConfig,
}

impl HttpBackend {
    pub fn new(config: HttpConfig) -> Self {
        Self { config }
    }

    fn body(&self, messages: &[ChatMessage]) -> serde_json::Value {
        let msgs: Vec<_> = messages
            .iter()
            .map(|m| {
                let role = match m.sender {
                    Sender::System => "system",
                    Sender::User => "user",
                    Sender::Assistant => "assistant",
                };
                json!({ "role": role, "content": m.text })
            })
            .collect();
        json!({ "model": self.config.model, "temperature": self.config.temperature, "messages": msgs })
    }

    /// One request. `Err((message, transient))` on failure.
    fn attempt(&self, client: &reqwest::blocking::Client, body: &serde_json::Value) -> Result<String, (String, bool)> {
        let mut req = client.post(&self.config.endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| (format!("request failed: {e}"), true))?;
        let status = resp.status();
        if !status.is_success() {
            let transient = status.is_server_error() || status.as_u16() == 429;
            let text = resp.text().unwrap_or_default();
            return Err((format!("HTTP {status}: {}", text.chars().take(500).collect::<String>()), transient));
        }
        let v: serde_json::Value = resp.json().map_err(|e| (format!("invalid response body: {e}"), false))?;
        v.pointer("/choices/0/message/content")
            .and_then(|c| c.as_str())
            .map(str::to_string)
            .ok_or_else(|| ("response has no choices[0].message.content".to_string(), false))
    }
}

impl LlmBackend for HttpBackend {
    fn complete(&self, messages: &[ChatMessage]) -> Result<String, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(self.config.timeout_secs))
            .build()
            .map_err(|e| BackendError {
                message: e.to_string(),
                attempts: 0,
                retriable: false,
            })?;
        let body = self.body(messages);
        let max = self.config.max_attempts.max(1);
        let mut attempts = 0;
        loop {
            attempts += 1;
            match self.attempt(&client, &body) {
                Ok(text) => return Ok(text),
                Err((message, transient)) => {
                    if !transient || attempts >= max {
                        return Err(BackendError {
                            message,
                            attempts,
                            retriable: transient,
                        });
                    }
                    std::thread::sleep(Duration::from_millis(self.config.backoff_ms << (attempts - 1)));
                }
            }
        }
    }

    fn metadata(&self) -> BackendMetadata {
        BackendMetadata {
            model: self.config.model.clone(),
            temperature: self.config.temperature,
        }
    }
}
