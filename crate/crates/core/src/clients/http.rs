//! HTTP clients speaking the de-facto chat-completions wire schema.
//!
//! Endpoint URL and model name always come from configuration. Transient
//! failures (transport errors and 5xx) are retried with exponential
//! backoff; 4xx responses are terminal.

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{
    validate_embed_input, ChatClient, ChatRequest, ChatResponse, ClientError, EmbeddingClient,
    FinishReason, Usage,
};
use crate::linalg::l2_normalize;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetryPolicy {
    /// Retries after the first attempt; total attempts = retries + 1.
    pub retries: u32,
    /// Backoff before retry k is `base_backoff_s * 2^k` seconds.
    pub base_backoff_s: f64,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        Self {
            retries: 3,
            base_backoff_s: 0.5,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HttpClientConfig {
    pub base_url: String,
    pub model: String,
    #[serde(default)]
    pub bearer_token: Option<String>,
    #[serde(default)]
    pub retry: RetryPolicy,
}

struct Transport {
    config: HttpClientConfig,
    agent: reqwest::blocking::Client,
}

impl Transport {
    fn new(config: HttpClientConfig) -> Self {
        Self {
            config,
            agent: reqwest::blocking::Client::new(),
        }
    }

    /// POSTs `body` to `path`, retrying per policy. Returns the parsed JSON
    /// body and the number of attempts spent.
    fn post_json(
        &self,
        path: &str,
        body: &serde_json::Value,
    ) -> Result<(serde_json::Value, u32), ClientError> {
        let url = format!("{}{path}", self.config.base_url.trim_end_matches('/'));
        let max_attempts = self.config.retry.retries + 1;
        let mut last_message = String::new();
        for attempt in 1..=max_attempts {
            if attempt > 1 {
                let k = attempt - 2;
                let delay = self.config.retry.base_backoff_s * f64::from(1u32 << k.min(16));
                std::thread::sleep(std::time::Duration::from_secs_f64(delay.max(0.0)));
            }
            let mut req = self.agent.post(&url).json(body);
            if let Some(token) = &self.config.bearer_token {
                req = req.bearer_auth(token);
            }
            match req.send() {
                Ok(resp) => {
                    let status = resp.status();
                    let text = resp.text().unwrap_or_default();
                    if status.is_success() {
                        let value: serde_json::Value =
                            serde_json::from_str(&text).map_err(|e| ClientError::Protocol {
                                message: format!("body is not JSON: {e}"),
                                body: text.clone(),
                            })?;
                        return Ok((value, attempt));
                    }
                    if status.is_server_error() {
                        last_message = format!("HTTP {status}");
                        continue;
                    }
                    return Err(ClientError::Http {
                        status: status.as_u16(),
                        message: text,
                    });
                }
                Err(e) => {
                    last_message = e.to_string();
                    continue;
                }
            }
        }
        Err(ClientError::Transport {
            attempts: max_attempts,
            message: last_message,
        })
    }
}

/// Chat-completions client: POST `<base_url>/v1/chat/completions`.
pub struct HttpChatClient {
    transport: Transport,
}

impl HttpChatClient {
    pub fn new(config: HttpClientConfig) -> Self {
        Self {
            transport: Transport::new(config),
        }
    }
}

impl ChatClient for HttpChatClient {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        let mut body = json!({
            "model": self.transport.config.model,
            "messages": request.messages,
            "temperature": request.temperature,
            "max_tokens": request.max_tokens,
        });
        if let Some(seed) = request.seed {
            body["seed"] = json!(seed);
        }
        let (value, attempts) = self.transport.post_json("/v1/chat/completions", &body)?;
        parse_chat_payload(&value, attempts)
    }

    fn identity(&self) -> String {
        format!(
            "http-chat:{}:{}",
            self.transport.config.base_url, self.transport.config.model
        )
    }
}

fn parse_chat_payload(value: &serde_json::Value, attempts: u32) -> Result<ChatResponse, ClientError> {
    let protocol = |message: &str| ClientError::Protocol {
        message: message.to_string(),
        body: value.to_string(),
    };
    let choice = value
        .get("choices")
        .and_then(|c| c.get(0))
        .ok_or_else(|| protocol("missing choices[0]"))?;
    let content = choice
        .pointer("/message/content")
        .and_then(|c| c.as_str())
        .ok_or_else(|| protocol("missing choices[0].message.content"))?
        .to_string();
    let finish_reason = match choice.get("finish_reason").and_then(|f| f.as_str()) {
        Some("length") => FinishReason::Length,
        Some("stop") | None => FinishReason::Stop,
        Some(_) => FinishReason::Error,
    };
    let usage = Usage {
        prompt_tokens: value
            .pointer("/usage/prompt_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or(0),
        completion_tokens: value
            .pointer("/usage/completion_tokens")
            .and_then(|v| v.as_u64())
            .unwrap_or(0),
    };
    Ok(ChatResponse {
        content,
        finish_reason,
        usage,
        attempts,
    })
}

/// Embeddings client: POST `<base_url>/v1/embeddings`. The embedding
/// dimension is discovered from the first response; vectors are
/// re-normalized client-side so the unit-norm contract holds regardless
/// of server behavior.
pub struct HttpEmbeddingClient {
    transport: Transport,
}

impl HttpEmbeddingClient {
    pub fn new(config: HttpClientConfig) -> Self {
        Self {
            transport: Transport::new(config),
        }
    }
}

impl EmbeddingClient for HttpEmbeddingClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        validate_embed_input(texts)?;
        let body = json!({
            "model": self.transport.config.model,
            "input": texts,
        });
        let (value, _) = self.transport.post_json("/v1/embeddings", &body)?;
        let protocol = |message: &str| ClientError::Protocol {
            message: message.to_string(),
            body: value.to_string(),
        };
        let data = value
            .get("data")
            .and_then(|d| d.as_array())
            .ok_or_else(|| protocol("missing data array"))?;
        if data.len() != texts.len() {
            return Err(protocol(&format!(
                "expected {} embeddings, got {}",
                texts.len(),
                data.len()
            )));
        }
        let mut out = Vec::with_capacity(data.len());
        let mut dimension = None;
        for item in data {
            let raw = item
                .get("embedding")
                .and_then(|e| e.as_array())
                .ok_or_else(|| protocol("missing data[i].embedding"))?;
            let mut v: Vec<f32> = raw
                .iter()
                .map(|x| x.as_f64().map(|f| f as f32))
                .collect::<Option<_>>()
                .ok_or_else(|| protocol("non-numeric embedding entry"))?;
            let expected = *dimension.get_or_insert(v.len());
            if v.len() != expected {
                return Err(ClientError::DimensionMismatch {
                    expected,
                    got: v.len(),
                });
            }
            l2_normalize(&mut v);
            out.push(v);
        }
        Ok(out)
    }

    fn identity(&self) -> String {
        format!(
            "http-embed:{}:{}",
            self.transport.config.base_url, self.transport.config.model
        )
    }
}
