//! OpenAI-compatible HTTP client used for all three roles.
//!
//! Chat calls go to `{url}/chat/completions`, embeddings to
//! `{url}/embeddings`. Images travel as base64 data URLs: inside an
//! `image_url` content part for chat, and as the `input` string for
//! embeddings.

use std::time::Duration;

use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use super::{check_embedding, BackendError, DecodingParams, EmbeddingBackend, Limiter, TextChatBackend, VisionChatBackend};
use crate::slide_store::TileImage;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EndpointConfig {
    /// Base URL up to and including the version segment, e.g. `http://host:8000/v1`.
    pub url: String,
    pub model: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub api_key: Option<String>,
    #[serde(default = "default_timeout_secs")]
    pub timeout_secs: u64,
    #[serde(default = "default_retries")]
    pub retries: u32,
    #[serde(default = "default_concurrency")]
    pub concurrency: usize,
    /// First backoff delay; doubles after every failed attempt.
    #[serde(default = "default_backoff_ms")]
    pub backoff_ms: u64,
}

fn default_timeout_secs() -> u64 {
    120
}
fn default_retries() -> u32 {
    3
}
fn default_concurrency() -> usize {
    4
}
fn default_backoff_ms() -> u64 {
    500
}

impl EndpointConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        Self {
            url: url.into(),
            model: model.into(),
            api_key: None,
            timeout_secs: default_timeout_secs(),
            retries: default_retries(),
            concurrency: default_concurrency(),
            backoff_ms: default_backoff_ms(),
        }
    }
}

pub struct HttpBackend {
    config: EndpointConfig,
    client: reqwest::blocking::Client,
    limiter: Limiter,
}

impl std::fmt::Debug for HttpBackend {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("HttpBackend")
            .field("url", &self.config.url)
            .field("model", &self.config.model)
            .finish()
    }
}

impl HttpBackend {
    pub fn new(config: EndpointConfig) -> Result<Self, BackendError> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_secs(config.timeout_secs))
            .build()
            .map_err(|e| BackendError::Config(e.to_string()))?;
        let limiter = Limiter::new(config.concurrency);
        Ok(Self {
            config,
            client,
            limiter,
        })
    }

    pub fn config(&self) -> &EndpointConfig {
        &self.config
    }

    fn endpoint(&self, path: &str) -> String {
        format!("{}/{}", self.config.url.trim_end_matches('/'), path)
    }

    /// POSTs `body`, retrying transient failures with exponential backoff.
    fn post(&self, path: &str, body: &Value) -> Result<Value, BackendError> {
        let endpoint = self.endpoint(path);
        let _permit = self.limiter.acquire();
        let mut delay = Duration::from_millis(self.config.backoff_ms);
        let mut attempt = 0;
        loop {
            match self.post_once(&endpoint, body) {
                Ok(v) => return Ok(v),
                Err(e) if e.is_retryable() && attempt < self.config.retries => {
                    tracing::warn!(%endpoint, attempt, error = %e, "retrying backend call");
                    std::thread::sleep(delay);
                    delay *= 2;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn post_once(&self, endpoint: &str, body: &Value) -> Result<Value, BackendError> {
        let mut req = self.client.post(endpoint).json(body);
        if let Some(key) = &self.config.api_key {
            req = req.bearer_auth(key);
        }
        let resp = req.send().map_err(|e| map_reqwest(endpoint, e))?;
        let status = resp.status();
        let text = resp.text().map_err(|e| map_reqwest(endpoint, e))?;
        if !status.is_success() {
            return Err(BackendError::Status {
                endpoint: endpoint.to_string(),
                status: status.as_u16(),
                body: truncate(&text, 512),
            });
        }
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol {
            endpoint: endpoint.to_string(),
            message: format!("invalid JSON body: {e}"),
        })
    }

    fn chat(&self, messages: Value, decoding: &DecodingParams) -> Result<String, BackendError> {
        let mut body = json!({
            "model": self.config.model,
            "messages": messages,
            "temperature": decoding.temperature,
            "max_tokens": decoding.max_tokens,
        });
        if let Some(seed) = decoding.seed {
            body["seed"] = json!(seed);
        }
        let endpoint = self.endpoint("chat/completions");
        let resp = self.post("chat/completions", &body)?;
        let content = resp
            .pointer("/choices/0/message/content")
            .and_then(Value::as_str)
            .ok_or_else(|| BackendError::Protocol {
                endpoint,
                message: "missing choices[0].message.content".into(),
            })?;
        if content.trim().is_empty() {
            return Err(BackendError::Empty);
        }
        Ok(content.to_string())
    }

    fn embed(&self, input: Value) -> Result<Vec<f32>, BackendError> {
        let body = json!({ "model": self.config.model, "input": input });
        let endpoint = self.endpoint("embeddings");
        let resp = self.post("embeddings", &body)?;
        let raw = resp
            .pointer("/data/0/embedding")
            .and_then(Value::as_array)
            .ok_or_else(|| BackendError::Protocol {
                endpoint: endpoint.clone(),
                message: "missing data[0].embedding".into(),
            })?;
        let v = raw
            .iter()
            .map(|x| x.as_f64().map(|f| f as f32))
            .collect::<Option<Vec<f32>>>()
            .ok_or_else(|| BackendError::Protocol {
                endpoint,
                message: "non-numeric embedding component".into(),
            })?;
        check_embedding(&v)?;
        Ok(v)
    }
}

pub(crate) fn data_url(image: &TileImage) -> String {
    format!(
        "data:{};base64,{}",
        image.media_type,
        base64::engine::general_purpose::STANDARD.encode(&image.bytes)
    )
}

fn map_reqwest(endpoint: &str, e: reqwest::Error) -> BackendError {
    if e.is_timeout() {
        BackendError::Timeout {
            endpoint: endpoint.to_string(),
        }
    } else {
        BackendError::Transport {
            endpoint: endpoint.to_string(),
            message: e.to_string(),
        }
    }
}

fn truncate(s: &str, max: usize) -> String {
    if s.len() <= max {
        return s.to_string();
    }
    let mut end = max;
    while !s.is_char_boundary(end) {
        end -= 1;
    }
    format!("{}…", &s[..end])
}

impl EmbeddingBackend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn embed_image(&self, image: &TileImage) -> Result<Vec<f32>, BackendError> {
        self.embed(json!(data_url(image)))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        self.embed(json!(text))
    }
}

impl VisionChatBackend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn describe(
        &self,
        image: &TileImage,
        system_prompt: &str,
        user_prompt: &str,
        decoding: &DecodingParams,
    ) -> Result<String, BackendError> {
        let messages = json!([
            { "role": "system", "content": system_prompt },
            { "role": "user", "content": [
                { "type": "text", "text": user_prompt },
                { "type": "image_url", "image_url": { "url": data_url(image) } }
            ]}
        ]);
        self.chat(messages, decoding)
    }
}

impl TextChatBackend for HttpBackend {
    fn model_id(&self) -> &str {
        &self.config.model
    }

    fn complete(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        decoding: &DecodingParams,
    ) -> Result<String, BackendError> {
        let messages = json!([
            { "role": "system", "content": system_prompt },
            { "role": "user", "content": user_prompt }
        ]);
        self.chat(messages, decoding)
    }
}
