//! Chat-completion client contract.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::time::Duration;

/// Fixed sampling temperature for every request the platform makes.
pub const TEMPERATURE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatMessage {
    pub role: String,
    pub content: String,
}

impl ChatMessage {
    pub fn user(content: impl Into<String>) -> Self {
        Self {
            role: "user".into(),
            content: content.into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatRequest {
    pub model: String,
    pub messages: Vec<ChatMessage>,
    pub temperature: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChatResponse {
    pub content: String,
}

pub trait LlmClient: Send + Sync {
    fn model_id(&self) -> &str;

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse>;

    /// Single user-message request at [`TEMPERATURE`].
    fn complete(&self, prompt: &str) -> Result<String> {
        let request = ChatRequest {
            model: self.model_id().to_owned(),
            messages: vec![ChatMessage::user(prompt)],
            temperature: TEMPERATURE,
        };
        self.chat(&request).map(|r| r.content)
    }
}

/// JSON-over-HTTP endpoint: POST `{model, messages, temperature}`,
/// response `{content}`. The API key travels as a bearer token and is never
/// printed by `Debug`.
pub struct HttpLlmClient {
    endpoint: String,
    model: String,
    api_key: Option<String>,
    client: reqwest::blocking::Client,
}

impl HttpLlmClient {
    pub fn new(
        endpoint: impl Into<String>,
        model: impl Into<String>,
        api_key: Option<String>,
    ) -> Result<Self> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(120))
            .build()
            .map_err(|e| Error::LlmUnavailable(e.to_string()))?;
        Ok(Self {
            endpoint: endpoint.into(),
            model: model.into(),
            api_key,
            client,
        })
    }
}

impl std::fmt::Debug for HttpLlmClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpLlmClient")
            .field("endpoint", &self.endpoint)
            .field("model", &self.model)
            .field("api_key", &self.api_key.as_ref().map(|_| "<redacted>"))
            .finish()
    }
}

impl LlmClient for HttpLlmClient {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn chat(&self, request: &ChatRequest) -> Result<ChatResponse> {
        let mut req = self.client.post(&self.endpoint).json(request);
        if let Some(key) = &self.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req
            .send()
            .and_then(|r| r.error_for_status())
            .map_err(|e| Error::LlmUnavailable(e.without_url().to_string()))?;
        resp.json()
            .map_err(|e| Error::LlmUnavailable(format!("bad response body: {}", e.without_url())))
    }
}
