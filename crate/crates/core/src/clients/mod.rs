//! Chat and embedding model interfaces.
//!
//! Everything downstream of data generation talks to models through the
//! two traits here, with one HTTP implementation (chat-completions wire
//! schema) and one deterministic mock of each, so the whole pipeline runs
//! offline in tests.

mod http;
mod mock;

pub use http::{HttpChatClient, HttpClientConfig, HttpEmbeddingClient, RetryPolicy};
pub use mock::{MockChatClient, MockEmbeddingClient, MockRule, MockScript, RequestMatcher};

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ClientError {
    #[error("invalid request: {0}")]
    InvalidRequest(String),
    #[error("transport failure after {attempts} attempts: {message}")]
    Transport { attempts: u32, message: String },
    #[error("server returned HTTP {status}: {message}")]
    Http { status: u16, message: String },
    #[error("protocol error: {message}; raw body: {body}")]
    Protocol { message: String, body: String },
    #[error("mock script has no rule for request #{ordinal}: {prompt_head:?}")]
    ScriptMiss { ordinal: u64, prompt_head: String },
    #[error("embedding dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("embedding input must be non-empty")]
    EmptyInput,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    System,
    User,
    Assistant,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: Role,
    pub content: String,
}

impl ChatMessage {
    pub fn system(content: impl Into<String>) -> Self {
        Self {
            role: Role::System,
            content: content.into(),
        }
    }

    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: Role::User,
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
    pub max_tokens: u32,
    pub seed: Option<u64>,
}

impl ChatRequest {
    pub fn validate(&self) -> Result<(), ClientError> {
        if self.messages.is_empty() {
            return Err(ClientError::InvalidRequest("messages must be non-empty".into()));
        }
        if self.messages.last().map(|m| m.role) != Some(Role::User) {
            return Err(ClientError::InvalidRequest(
                "last message role must be user".into(),
            ));
        }
        if self.temperature < 0.0 {
            return Err(ClientError::InvalidRequest("temperature must be >= 0".into()));
        }
        Ok(())
    }

    /// All message contents joined, the text mock matchers and logs see.
    pub fn flattened_text(&self) -> String {
        let parts: Vec<&str> = self.messages.iter().map(|m| m.content.as_str()).collect();
        parts.join("\n")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinishReason {
    Stop,
    Length,
    Error,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Usage {
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
    pub finish_reason: FinishReason,
    pub usage: Usage,
    /// Transport attempts spent obtaining this response (1 = no retries).
    #[serde(default = "one")]
    pub attempts: u32,
}

fn one() -> u32 {
    1
}

pub trait ChatClient: Send + Sync {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError>;

    /// Stable identity string recorded in manifests.
    fn identity(&self) -> String;
}

pub trait EmbeddingClient: Send + Sync {
    /// One unit-norm vector per text, all of equal dimension.
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError>;

    fn identity(&self) -> String;
}

pub(crate) fn validate_embed_input(texts: &[String]) -> Result<(), ClientError> {
    if texts.is_empty() || texts.iter().any(|t| t.is_empty()) {
        return Err(ClientError::EmptyInput);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn request_validation_rejects_empty_and_non_user_tail() {
        let empty = ChatRequest {
            messages: vec![],
            temperature: 0.0,
            max_tokens: 16,
            seed: None,
        };
        assert!(empty.validate().is_err());

        let assistant_tail = ChatRequest {
            messages: vec![
                ChatMessage::user("hi"),
                ChatMessage {
                    role: Role::Assistant,
                    content: "hello".into(),
                },
            ],
            temperature: 0.0,
            max_tokens: 16,
            seed: None,
        };
        assert!(assistant_tail.validate().is_err());

        let ok = ChatRequest {
            messages: vec![ChatMessage::system("s"), ChatMessage::user("u")],
            temperature: 0.7,
            max_tokens: 16,
            seed: Some(1),
        };
        assert!(ok.validate().is_ok());
    }
}
