//! Foundation-model roles behind small blocking traits.
//!
//! Three roles drive a session: a text/image embedder (retrieval), a vision
//! chat model (patch descriptions) and a text chat model (reasoning). Each
//! has an HTTP implementation speaking the OpenAI-compatible wire protocol,
//! a scripted implementation for deterministic tests, and a disk cache
//! wrapper.

mod cache;
mod http;
mod scripted;

use std::sync::{Condvar, Mutex};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::slide_store::TileImage;

pub use cache::{CacheStats, Cached};
pub use http::{EndpointConfig, HttpBackend};
pub use scripted::{ChatScript, EmbeddingScript, RecordedCall, ScriptRule, ScriptedChat, ScriptedEmbedder};

#[derive(Debug, Error)]
pub enum BackendError {
    #[error("request to {endpoint} timed out")]
    Timeout { endpoint: String },
    #[error("transport error talking to {endpoint}: {message}")]
    Transport { endpoint: String, message: String },
    #[error("{endpoint} returned HTTP {status}: {body}")]
    Status {
        endpoint: String,
        status: u16,
        body: String,
    },
    #[error("malformed response from {endpoint}: {message}")]
    Protocol { endpoint: String, message: String },
    #[error("model returned an empty response")]
    Empty,
    #[error("scripted backend has no rule left matching the request")]
    ScriptExhausted,
    #[error("invalid embedding: {0}")]
    InvalidEmbedding(String),
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    /// Network failures and 5xx answers are worth another attempt.
    pub fn is_retryable(&self) -> bool {
        match self {
            BackendError::Transport { .. } => true,
            BackendError::Status { status, .. } => *status >= 500,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingParams {
    #[serde(default)]
    pub temperature: f32,
    #[serde(default = "default_max_tokens")]
    pub max_tokens: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

fn default_max_tokens() -> u32 {
    1024
}

impl Default for DecodingParams {
    fn default() -> Self {
        Self {
            temperature: 0.0,
            max_tokens: default_max_tokens(),
            seed: None,
        }
    }
}

pub trait EmbeddingBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn embed_image(&self, image: &TileImage) -> Result<Vec<f32>, BackendError>;
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError>;
}

pub trait VisionChatBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn describe(
        &self,
        image: &TileImage,
        system_prompt: &str,
        user_prompt: &str,
        decoding: &DecodingParams,
    ) -> Result<String, BackendError>;
}

pub trait TextChatBackend: Send + Sync {
    fn model_id(&self) -> &str;
    fn complete(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        decoding: &DecodingParams,
    ) -> Result<String, BackendError>;
}

impl<T: EmbeddingBackend + ?Sized> EmbeddingBackend for std::sync::Arc<T> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn embed_image(&self, image: &TileImage) -> Result<Vec<f32>, BackendError> {
        (**self).embed_image(image)
    }
    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        (**self).embed_text(text)
    }
}

impl<T: VisionChatBackend + ?Sized> VisionChatBackend for std::sync::Arc<T> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn describe(
        &self,
        image: &TileImage,
        system_prompt: &str,
        user_prompt: &str,
        decoding: &DecodingParams,
    ) -> Result<String, BackendError> {
        (**self).describe(image, system_prompt, user_prompt, decoding)
    }
}

impl<T: TextChatBackend + ?Sized> TextChatBackend for std::sync::Arc<T> {
    fn model_id(&self) -> &str {
        (**self).model_id()
    }
    fn complete(
        &self,
        system_prompt: &str,
        user_prompt: &str,
        decoding: &DecodingParams,
    ) -> Result<String, BackendError> {
        (**self).complete(system_prompt, user_prompt, decoding)
    }
}

/// Hex SHA-256 of arbitrary content; used for image identity everywhere.
pub fn content_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Rejects empty, non-finite and zero vectors.
pub fn check_embedding(v: &[f32]) -> Result<(), BackendError> {
    if v.is_empty() {
        return Err(BackendError::InvalidEmbedding("empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(BackendError::InvalidEmbedding("non-finite component".into()));
    }
    if v.iter().all(|x| *x == 0.0) {
        return Err(BackendError::InvalidEmbedding("zero vector".into()));
    }
    Ok(())
}

/// Counting semaphore bounding in-flight calls per backend.
#[derive(Debug)]
pub struct Limiter {
    permits: Mutex<usize>,
    freed: Condvar,
}

pub struct Permit<'a>(&'a Limiter);

impl Limiter {
    pub fn new(permits: usize) -> Self {
        Self {
            permits: Mutex::new(permits.max(1)),
            freed: Condvar::new(),
        }
    }

    pub fn acquire(&self) -> Permit<'_> {
        let mut n = self.permits.lock().unwrap_or_else(|e| e.into_inner());
        while *n == 0 {
            n = self.freed.wait(n).unwrap_or_else(|e| e.into_inner());
        }
        *n -= 1;
        Permit(self)
    }
}

impl Drop for Permit<'_> {
    fn drop(&mut self) {
        let mut n = self.0.permits.lock().unwrap_or_else(|e| e.into_inner());
        *n += 1;
        self.0.freed.notify_one();
    }
}
