//! Deterministic stand-ins for the model roles.
//!
//! A chat script is an ordered rule list. Each call takes the first rule
//! that is still available and matches; one-shot rules are consumed,
//! `repeat` rules stay. No match means the script is exhausted.
//!
//! When several describe calls run in parallel, one-shot rules without an
//! image matcher are taken in arrival order. Scripts meant for replay
//! should key descriptions on `image_sha256` or use `repeat` rules.

use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{check_embedding, content_hash, BackendError, DecodingParams, EmbeddingBackend, TextChatBackend, VisionChatBackend};
use crate::slide_store::TileImage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScriptRule {
    /// Substring that must occur in `system_prompt + "\n" + user_prompt`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub contains: Option<String>,
    /// Prefix of the image's hex SHA-256 (vision calls only).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_sha256: Option<String>,
    /// Canned response; `{image}` expands to the first 12 hex chars of the image hash.
    pub response: String,
    #[serde(default)]
    pub repeat: bool,
}

impl ScriptRule {
    pub fn once(contains: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            contains: Some(contains.into()),
            image_sha256: None,
            response: response.into(),
            repeat: false,
        }
    }

    pub fn always(contains: impl Into<String>, response: impl Into<String>) -> Self {
        Self {
            repeat: true,
            ..Self::once(contains, response)
        }
    }

    /// Matches every call.
    pub fn fallback(response: impl Into<String>) -> Self {
        Self {
            contains: None,
            image_sha256: None,
            response: response.into(),
            repeat: true,
        }
    }

    pub fn for_image(mut self, sha256: impl Into<String>) -> Self {
        self.image_sha256 = Some(sha256.into());
        self
    }

    fn matches(&self, prompt: &str, image_hash: Option<&str>) -> bool {
        if let Some(needle) = &self.contains {
            if !prompt.contains(needle.as_str()) {
                return false;
            }
        }
        if let Some(prefix) = &self.image_sha256 {
            match image_hash {
                Some(h) if h.starts_with(prefix.as_str()) => {}
                _ => return false,
            }
        }
        true
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChatScript {
    #[serde(default = "default_model")]
    pub model: String,
    #[serde(default)]
    pub rules: Vec<ScriptRule>,
}

fn default_model() -> String {
    "scripted".into()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedCall {
    pub system_prompt: String,
    pub user_prompt: String,
    pub image_sha256: Option<String>,
    pub response: Option<String>,
}

#[derive(Debug)]
struct ScriptState {
    rules: Vec<ScriptRule>,
    consumed: Vec<bool>,
    calls: Vec<RecordedCall>,
}

/// Scripted chat model; serves both the vision and the text role.
#[derive(Debug)]
pub struct ScriptedChat {
    model: String,
    state: Mutex<ScriptState>,
}

impl ScriptedChat {
    pub fn new(rules: Vec<ScriptRule>) -> Self {
        Self::from_script(ChatScript {
            model: default_model(),
            rules,
        })
    }

    pub fn from_script(script: ChatScript) -> Self {
        let consumed = vec![false; script.rules.len()];
        Self {
            model: script.model,
            state: Mutex::new(ScriptState {
                rules: script.rules,
                consumed,
                calls: Vec::new(),
            }),
        }
    }

    pub fn push(&self, rule: ScriptRule) {
        let mut st = self.lock();
        st.rules.push(rule);
        st.consumed.push(false);
    }

    pub fn calls(&self) -> Vec<RecordedCall> {
        self.lock().calls.clone()
    }

    /// One-shot rules not yet consumed.
    pub fn pending_rules(&self) -> usize {
        let st = self.lock();
        st.rules
            .iter()
            .zip(&st.consumed)
            .filter(|(r, c)| !r.repeat && !**c)
            .count()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, ScriptState> {
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }

    fn respond(&self, system: &str, user: &str, image_hash: Option<&str>) -> Result<String, BackendError> {
        let prompt = format!("{system}\n{user}");
        let mut st = self.lock();
        let hit = st
            .rules
            .iter()
            .enumerate()
            .find(|(i, r)| !st.consumed[*i] && r.matches(&prompt, image_hash))
            .map(|(i, r)| (i, r.repeat, r.response.clone()));
        let response = hit.map(|(i, repeat, resp)| {
            if !repeat {
                st.consumed[i] = true;
            }
            match image_hash {
                Some(h) => resp.replace("{image}", &h[..12.min(h.len())]),
                None => resp,
            }
        });
        st.calls.push(RecordedCall {
            system_prompt: system.to_string(),
            user_prompt: user.to_string(),
            image_sha256: image_hash.map(str::to_string),
            response: response.clone(),
        });
        match response {
            None => Err(BackendError::ScriptExhausted),
            Some(r) if r.trim().is_empty() => Err(BackendError::Empty),
            Some(r) => Ok(r),
        }
    }
}

impl TextChatBackend for ScriptedChat {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn complete(&self, system_prompt: &str, user_prompt: &str, _decoding: &DecodingParams) -> Result<String, BackendError> {
        self.respond(system_prompt, user_prompt, None)
    }
}

impl VisionChatBackend for ScriptedChat {
    fn model_id(&self) -> &str {
        &self.model
    }

    fn describe(
        &self,
        image: &TileImage,
        system_prompt: &str,
        user_prompt: &str,
        _decoding: &DecodingParams,
    ) -> Result<String, BackendError> {
        let hash = content_hash(&image.bytes);
        self.respond(system_prompt, user_prompt, Some(&hash))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingScript {
    #[serde(default = "default_embed_model")]
    pub model: String,
    pub dim: usize,
    /// Exact text → vector.
    #[serde(default)]
    pub texts: BTreeMap<String, Vec<f32>>,
    /// Image hex SHA-256 → vector.
    #[serde(default)]
    pub images: BTreeMap<String, Vec<f32>>,
    /// Unlisted content gets a vector derived from its hash instead of an error.
    #[serde(default = "default_true")]
    pub hashed_fallback: bool,
}

fn default_embed_model() -> String {
    "scripted-embedder".into()
}

fn default_true() -> bool {
    true
}

impl EmbeddingScript {
    pub fn hashed(dim: usize) -> Self {
        Self {
            model: default_embed_model(),
            dim,
            texts: BTreeMap::new(),
            images: BTreeMap::new(),
            hashed_fallback: true,
        }
    }
}

/// Deterministic pseudo-random vector in `[-1, 1]^dim` keyed by content.
pub fn hashed_vector(content: &[u8], dim: usize) -> Vec<f32> {
    let seed = Sha256::digest(content);
    let mut out = Vec::with_capacity(dim);
    let mut block = 0u32;
    while out.len() < dim {
        let mut h = Sha256::new();
        h.update(seed);
        h.update(block.to_le_bytes());
        for chunk in h.finalize().chunks_exact(4) {
            if out.len() == dim {
                break;
            }
            let x = u32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            out.push((x as f64 / u32::MAX as f64 * 2.0 - 1.0) as f32);
        }
        block += 1;
    }
    out
}

#[derive(Debug)]
pub struct ScriptedEmbedder {
    script: EmbeddingScript,
    calls: Mutex<usize>,
}

impl ScriptedEmbedder {
    pub fn new(script: EmbeddingScript) -> Self {
        Self {
            script,
            calls: Mutex::new(0),
        }
    }

    pub fn hashed(dim: usize) -> Self {
        Self::new(EmbeddingScript::hashed(dim))
    }

    pub fn dim(&self) -> usize {
        self.script.dim
    }

    pub fn call_count(&self) -> usize {
        *self.calls.lock().unwrap_or_else(|e| e.into_inner())
    }

    /// The vector this embedder returns for `image`.
    pub fn image_vector(&self, image: &TileImage) -> Result<Vec<f32>, BackendError> {
        let hash = content_hash(&image.bytes);
        self.lookup(self.script.images.get(&hash), &image.bytes)
    }

    fn lookup(&self, listed: Option<&Vec<f32>>, content: &[u8]) -> Result<Vec<f32>, BackendError> {
        *self.calls.lock().unwrap_or_else(|e| e.into_inner()) += 1;
        let v = match listed {
            Some(v) => v.clone(),
            None if self.script.hashed_fallback => hashed_vector(content, self.script.dim),
            None => return Err(BackendError::ScriptExhausted),
        };
        if v.len() != self.script.dim {
            return Err(BackendError::InvalidEmbedding(format!(
                "scripted vector has dimension {}, expected {}",
                v.len(),
                self.script.dim
            )));
        }
        check_embedding(&v)?;
        Ok(v)
    }
}

impl EmbeddingBackend for ScriptedEmbedder {
    fn model_id(&self) -> &str {
        &self.script.model
    }

    fn embed_image(&self, image: &TileImage) -> Result<Vec<f32>, BackendError> {
        self.image_vector(image)
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        self.lookup(self.script.texts.get(text), text.as_bytes())
    }
}
