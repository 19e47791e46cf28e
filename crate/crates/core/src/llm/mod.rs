//! LLM explanations: prompt assembly, chat sessions and backends.

mod backend;
mod prompt;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use backend::{
    message_key, BackendError, BackendMetadata, HttpBackend, HttpConfig, LlmBackend, MockBackend, ENV_API_KEY,
    ENV_ENDPOINT, ENV_MODEL, ENV_TEMPERATURE,
};
pub use prompt::{
    build_prompt, find_action_line, icl_examples, prediction_prompt, IclExample, PromptBundle, BR_DESCRIPTION,
    ENV_DESCRIPTION, PREDICTION_PROMPT,
};

use crate::env::{Action, Observation, Role, RoomCoord};
use crate::eval::StateCategory;
use crate::policy::Behavior;
use crate::repr::{parse_action_line, BehaviorRepresentation, BrKind, ReprError};

pub const RECORD_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sender {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub sender: Sender,
    pub text: String,
}

impl ChatMessage {
    pub fn new(sender: Sender, text: impl Into<String>) -> Self {
        Self {
            sender,
            text: text.into(),
        }
    }
}

/// Append-only message history: one system message, then user/assistant turns.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatSession {
    messages: Vec<ChatMessage>,
    pub created_at: DateTime<Utc>,
    pub state_ref: String,
}

impl ChatSession {
    pub fn new(state_ref: impl Into<String>) -> Self {
        Self {
            messages: Vec::new(),
            created_at: Utc::now(),
            state_ref: state_ref.into(),
        }
    }

    pub fn messages(&self) -> &[ChatMessage] {
        &self.messages
    }

    pub fn len(&self) -> usize {
        self.messages.len()
    }

    pub fn is_empty(&self) -> bool {
        self.messages.is_empty()
    }

    fn open(&mut self, system: String) {
        debug_assert!(self.messages.is_empty());
        self.messages.push(ChatMessage::new(Sender::System, system));
    }

    /// History that would be sent for a new user turn.
    fn with_user(&self, text: &str) -> Vec<ChatMessage> {
        let mut msgs = self.messages.clone();
        msgs.push(ChatMessage::new(Sender::User, text));
        msgs
    }

    fn push_turn(&mut self, user: String, assistant: String) {
        self.messages.push(ChatMessage::new(Sender::User, user));
        self.messages.push(ChatMessage::new(Sender::Assistant, assistant));
    }

    pub fn validate(&self) -> Result<(), String> {
        let mut it = self.messages.iter();
        match it.next() {
            None => return Ok(()),
            Some(m) if m.sender != Sender::System => return Err("first message is not a system message".into()),
            _ => {}
        }
        for (i, m) in it.enumerate() {
            let expected = if i % 2 == 0 { Sender::User } else { Sender::Assistant };
            if m.sender != expected {
                return Err(format!("message {} should be from {expected:?}", i + 1));
            }
        }
        if self.messages.len().is_multiple_of(2) {
            return Err("session ends with an unanswered user message".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum PredictionOutcome {
    Parsed { role: Role, action: Action, from: RoomCoord },
    Unparseable { reason: String },
}

/// Reads the `ANSWER:` line of a prediction reply.
pub fn parse_prediction(reply: &str) -> PredictionOutcome {
    let Some(answer) = reply.lines().find_map(|l| l.trim().strip_prefix("ANSWER:")) else {
        return PredictionOutcome::Unparseable {
            reason: "no ANSWER line".into(),
        };
    };
    match parse_action_line(answer.trim()) {
        Ok((role, action, from)) => PredictionOutcome::Parsed { role, action, from },
        Err(e) => PredictionOutcome::Unparseable { reason: e.to_string() },
    }
}

/// Where an explained state came from.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StateOrigin {
    pub episode: String,
    pub t: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplanationRecord {
    pub schema_version: u32,
    pub id: String,
    pub behavior: Behavior,
    pub role: Role,
    pub br_kind: BrKind,
    /// Unavailable for Fixed and for policies without goal introspection.
    pub state_category: Option<StateCategory>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub origin: Option<StateOrigin>,
    pub observation: Observation,
    /// Expert action being explained.
    pub action: Action,
    pub tree_action: Action,
    pub br_payload: BehaviorRepresentation,
    pub prompt: PromptBundle,
    pub prompt_text: String,
    pub explanation_text: Option<String>,
    pub prediction_text: Option<String>,
    pub prediction: Option<PredictionOutcome>,
    pub session: ChatSession,
    pub gated: bool,
    pub backend: Option<BackendMetadata>,
}

#[derive(Debug, Clone)]
pub struct ExplainInput {
    pub behavior: Behavior,
    pub role: Role,
    pub observation: Observation,
    pub action: Action,
    pub tree_action: Action,
    pub br: BehaviorRepresentation,
    pub state_category: Option<StateCategory>,
    pub origin: Option<StateOrigin>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ExplainError {
    #[error("tree action {tree:?} differs from expert action {expert:?}; explanation refused")]
    Gated { tree: Action, expert: Action },
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("{0}")]
    Precondition(String),
    #[error(transparent)]
    Repr(#[from] ReprError),
}

impl ExplanationRecord {
    pub fn prepare(id: impl Into<String>, input: ExplainInput) -> Result<Self, ExplainError> {
        let id = id.into();
        let from = input.observation.position(input.role);
        let prompt = build_prompt(&input.br, input.role, from, input.action)?;
        Ok(Self {
            schema_version: RECORD_SCHEMA_VERSION,
            session: ChatSession::new(id.clone()),
            id,
            behavior: input.behavior,
            role: input.role,
            br_kind: input.br.kind(),
            state_category: input.state_category,
            origin: input.origin,
            observation: input.observation,
            action: input.action,
            tree_action: input.tree_action,
            br_payload: input.br,
            prompt_text: prompt.full_text(),
            prompt,
            explanation_text: None,
            prediction_text: None,
            prediction: None,
            gated: input.tree_action == input.action,
            backend: None,
        })
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.gated != (self.tree_action == self.action) {
            return Err("gated flag disagrees with tree and expert actions".into());
        }
        if !self.gated && self.explanation_text.is_some() {
            return Err("ungated record carries an explanation".into());
        }
        if self.br_kind != self.br_payload.kind() {
            return Err("br_kind disagrees with payload".into());
        }
        self.session.validate()
    }
}

/// Sends the prompt and stores the reply as the explanation.
pub fn request_explanation(record: &mut ExplanationRecord, backend: &dyn LlmBackend) -> Result<(), ExplainError> {
    if !record.gated {
        return Err(ExplainError::Gated {
            tree: record.tree_action,
            expert: record.action,
        });
    }
    if record.explanation_text.is_some() || !record.session.is_empty() {
        return Err(ExplainError::Precondition("record already has an explanation".into()));
    }
    let system = record.prompt.system_text();
    let user = record.prompt.user_text();
    let msgs = vec![
        ChatMessage::new(Sender::System, system.clone()),
        ChatMessage::new(Sender::User, user.clone()),
    ];
    let reply = backend.complete(&msgs)?;
    record.session.open(system);
    record.session.push_turn(user, reply.clone());
    record.explanation_text = Some(reply);
    record.backend = Some(backend.metadata());
    Ok(())
}

fn turn(record: &mut ExplanationRecord, text: String, backend: &dyn LlmBackend) -> Result<String, ExplainError> {
    if record.session.is_empty() {
        return Err(ExplainError::Precondition("session has no explanation yet".into()));
    }
    let reply = backend.complete(&record.session.with_user(&text))?;
    record.session.push_turn(text, reply.clone());
    Ok(reply)
}

/// Asks for the agent's next action in the `ANSWER:` format.
pub fn request_action_prediction(record: &mut ExplanationRecord, backend: &dyn LlmBackend) -> Result<(), ExplainError> {
    if record.explanation_text.is_none() {
        return Err(ExplainError::Precondition("no explanation to predict from".into()));
    }
    let reply = turn(record, prediction_prompt(record.role), backend)?;
    record.prediction = Some(parse_prediction(&reply));
    record.prediction_text = Some(reply);
    Ok(())
}

pub fn follow_up(record: &mut ExplanationRecord, user_text: &str, backend: &dyn LlmBackend) -> Result<String, ExplainError> {
    turn(record, user_text.to_string(), backend)
}
