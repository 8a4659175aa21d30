//! Deterministic mock clients for offline runs and tests.

use parking_lot::Mutex;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{
    validate_embed_input, ChatClient, ChatRequest, ChatResponse, ClientError, EmbeddingClient,
    FinishReason, Usage,
};
use crate::linalg::l2_normalize;
use crate::seeded::sha256_hex;

/// How a scripted rule decides whether it answers a request.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RequestMatcher {
    /// 1-based arrival index of the request. Order-dependent by nature;
    /// use only in serial tests.
    Ordinal(u64),
    /// The flattened prompt text contains this substring.
    Substring(String),
    /// The flattened prompt text contains every listed substring. Used to
    /// pin a rule to one template AND one context at the same time.
    AllOf(Vec<String>),
}

impl RequestMatcher {
    fn matches(&self, ordinal: u64, prompt: &str) -> bool {
        match self {
            RequestMatcher::Ordinal(n) => *n == ordinal,
            RequestMatcher::Substring(s) => prompt.contains(s.as_str()),
            RequestMatcher::AllOf(parts) => parts.iter().all(|p| prompt.contains(p.as_str())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockRule {
    #[serde(rename = "match")]
    pub matcher: RequestMatcher,
    pub response: String,
}

/// Ordered rules plus an optional default. Ordinal rules are checked
/// first, then substring rules in declaration order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MockScript {
    #[serde(default)]
    pub rules: Vec<MockRule>,
    #[serde(default)]
    pub default: Option<String>,
}

impl MockScript {
    pub fn from_json(json: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(json)
    }

    /// Script with no rules that answers everything with `response`.
    pub fn with_default(response: impl Into<String>) -> Self {
        Self {
            rules: Vec::new(),
            default: Some(response.into()),
        }
    }

    pub fn set_default(&mut self, response: impl Into<String>) {
        self.default = Some(response.into());
    }

    pub fn push_substring(&mut self, needle: impl Into<String>, response: impl Into<String>) {
        self.rules.push(MockRule {
            matcher: RequestMatcher::Substring(needle.into()),
            response: response.into(),
        });
    }

    pub fn push_all_of(&mut self, needles: &[&str], response: impl Into<String>) {
        self.rules.push(MockRule {
            matcher: RequestMatcher::AllOf(needles.iter().map(|s| s.to_string()).collect()),
            response: response.into(),
        });
    }

    pub fn push_ordinal(&mut self, ordinal: u64, response: impl Into<String>) {
        self.rules.push(MockRule {
            matcher: RequestMatcher::Ordinal(ordinal),
            response: response.into(),
        });
    }

    fn respond(&self, ordinal: u64, prompt: &str) -> Option<String> {
        let (ordinals, rest): (Vec<&MockRule>, Vec<&MockRule>) = self
            .rules
            .iter()
            .partition(|r| matches!(r.matcher, RequestMatcher::Ordinal(_)));
        for rule in ordinals.into_iter().chain(rest) {
            if rule.matcher.matches(ordinal, prompt) {
                return Some(rule.response.clone());
            }
        }
        self.default.clone()
    }
}

/// Scripted chat client. The arrival counter sits behind a lock so
/// concurrent use stays deterministic per matcher.
pub struct MockChatClient {
    script: MockScript,
    counter: Mutex<u64>,
}

impl MockChatClient {
    pub fn new(script: MockScript) -> Self {
        Self {
            script,
            counter: Mutex::new(0),
        }
    }

    pub fn requests_served(&self) -> u64 {
        *self.counter.lock()
    }
}

impl ChatClient for MockChatClient {
    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse, ClientError> {
        request.validate()?;
        let ordinal = {
            let mut c = self.counter.lock();
            *c += 1;
            *c
        };
        let prompt = request.flattened_text();
        let content = self.script.respond(ordinal, &prompt).ok_or_else(|| {
            ClientError::ScriptMiss {
                ordinal,
                prompt_head: prompt.chars().take(80).collect(),
            }
        })?;
        Ok(ChatResponse {
            usage: Usage {
                prompt_tokens: prompt.split_whitespace().count() as u64,
                completion_tokens: content.split_whitespace().count() as u64,
            },
            content,
            finish_reason: FinishReason::Stop,
            attempts: 1,
        })
    }

    fn identity(&self) -> String {
        let script_json = serde_json::to_vec(&self.script).expect("script serializes");
        format!("mock-chat:{}", &sha256_hex(&script_json)[..12])
    }
}

/// Hash-seeded embedding mock: each text maps to a pseudo-random unit
/// vector, identical texts to bitwise-identical vectors.
pub struct MockEmbeddingClient {
    dimension: usize,
    seed: u64,
}

impl MockEmbeddingClient {
    pub const DEFAULT_DIMENSION: usize = 32;

    pub fn new(dimension: usize, seed: u64) -> Self {
        assert!(dimension > 0, "embedding dimension must be positive");
        Self { dimension, seed }
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    fn vector_for(&self, text: &str) -> Vec<f32> {
        let mut h = Sha256::new();
        h.update(self.seed.to_le_bytes());
        h.update([0u8]);
        h.update(text.as_bytes());
        let digest = h.finalize();
        let mut key = [0u8; 32];
        key.copy_from_slice(&digest);
        let mut rng = ChaCha8Rng::from_seed(key);
        let mut v: Vec<f32> = (0..self.dimension)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        l2_normalize(&mut v);
        v
    }
}

impl Default for MockEmbeddingClient {
    fn default() -> Self {
        Self::new(Self::DEFAULT_DIMENSION, 0)
    }
}

impl EmbeddingClient for MockEmbeddingClient {
    fn embed(&self, texts: &[String]) -> Result<Vec<Vec<f32>>, ClientError> {
        validate_embed_input(texts)?;
        Ok(texts.iter().map(|t| self.vector_for(t)).collect())
    }

    fn identity(&self) -> String {
        format!("mock-embed:dim{}:seed{}", self.dimension, self.seed)
    }
}
