//! Disk cache in front of any backend role.
//!
//! Key: SHA-256 over the role, model id, prompts, image hash and decoding
//! parameters. One JSON file per key under `{dir}/{key[..2]}/{key}.json`.
//! Unreadable entries are logged, recomputed and overwritten.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use super::{content_hash, BackendError, DecodingParams, EmbeddingBackend, TextChatBackend, VisionChatBackend};
use crate::slide_store::TileImage;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CacheStats {
    pub hits: u64,
    pub misses: u64,
    pub repaired: u64,
}

#[derive(Serialize, Deserialize)]
struct Entry<T> {
    key: String,
    value: T,
}

pub struct Cached<B> {
    inner: B,
    dir: PathBuf,
    key_locks: Mutex<HashMap<String, Arc<Mutex<()>>>>,
    hits: AtomicU64,
    misses: AtomicU64,
    repaired: AtomicU64,
}

impl<B> Cached<B> {
    pub fn new(inner: B, dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        Ok(Self {
            inner,
            dir,
            key_locks: Mutex::new(HashMap::new()),
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
            repaired: AtomicU64::new(0),
        })
    }

    pub fn inner(&self) -> &B {
        &self.inner
    }

    pub fn stats(&self) -> CacheStats {
        CacheStats {
            hits: self.hits.load(Ordering::Relaxed),
            misses: self.misses.load(Ordering::Relaxed),
            repaired: self.repaired.load(Ordering::Relaxed),
        }
    }

    pub fn entry_path(&self, key: &str) -> PathBuf {
        self.dir.join(&key[..2]).join(format!("{key}.json"))
    }

    fn key_lock(&self, key: &str) -> Arc<Mutex<()>> {
        let mut locks = self.key_locks.lock().unwrap_or_else(|e| e.into_inner());
        locks.entry(key.to_string()).or_default().clone()
    }

    fn get_or_compute<T, F>(&self, descriptor: Value, compute: F) -> Result<T, BackendError>
    where
        T: Serialize + DeserializeOwned,
        F: FnOnce(&B) -> Result<T, BackendError>,
    {
        let key = cache_key(&descriptor);
        let lock = self.key_lock(&key);
        let _guard = lock.lock().unwrap_or_else(|e| e.into_inner());
        let path = self.entry_path(&key);
        match read_entry::<T>(&path, &key) {
            Ok(Some(v)) => {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(v);
            }
            Ok(None) => {}
            Err(reason) => {
                tracing::warn!(path = %path.display(), %reason, "ignoring corrupt cache entry");
                self.repaired.fetch_add(1, Ordering::Relaxed);
            }
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let value = compute(&self.inner)?;
        if let Err(e) = write_entry(&path, &key, &value) {
            tracing::warn!(path = %path.display(), error = %e, "could not write cache entry");
        }
        Ok(value)
    }
}

fn cache_key(descriptor: &Value) -> String {
    // serde_json maps are ordered, so the serialization is canonical.
    hex::encode(Sha256::digest(descriptor.to_string().as_bytes()))
}

fn read_entry<T: DeserializeOwned>(path: &Path, key: &str) -> Result<Option<T>, String> {
    let raw = match fs::read(path) {
        Ok(raw) => raw,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(None),
        Err(e) => return Err(e.to_string()),
    };
    let entry: Entry<T> = serde_json::from_slice(&raw).map_err(|e| e.to_string())?;
    if entry.key != key {
        return Err("key mismatch".into());
    }
    Ok(Some(entry.value))
}

fn write_entry<T: Serialize>(path: &Path, key: &str, value: &T) -> std::io::Result<()> {
    let parent = path.parent().expect("cache entries live in a shard directory");
    fs::create_dir_all(parent)?;
    let mut tmp = tempfile_in(parent)?;
    serde_json::to_writer(&mut tmp.0, &Entry { key: key.to_string(), value }).map_err(std::io::Error::other)?;
    tmp.0.flush()?;
    fs::rename(&tmp.1, path)
}

fn tempfile_in(dir: &Path) -> std::io::Result<(fs::File, PathBuf)> {
    let path = dir.join(format!(".tmp-{}", uuid::Uuid::new_v4()));
    Ok((fs::File::create(&path)?, path))
}

impl<B: EmbeddingBackend> EmbeddingBackend for Cached<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn embed_image(&self, image: &TileImage) -> Result<Vec<f32>, BackendError> {
        let d = json!({
            "role": "embed_image",
            "model": self.inner.model_id(),
            "image": content_hash(&image.bytes),
        });
        self.get_or_compute(d, |b| b.embed_image(image))
    }

    fn embed_text(&self, text: &str) -> Result<Vec<f32>, BackendError> {
        let d = json!({
            "role": "embed_text",
            "model": self.inner.model_id(),
            "text": text,
        });
        self.get_or_compute(d, |b| b.embed_text(text))
    }
}

impl<B: VisionChatBackend> VisionChatBackend for Cached<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn describe(
        &self,
        image: &TileImage,
        system_prompt: &str,
        user_prompt: &str,
        decoding: &DecodingParams,
    ) -> Result<String, BackendError> {
        let d = json!({
            "role": "describe",
            "model": self.inner.model_id(),
            "system": system_prompt,
            "user": user_prompt,
            "image": content_hash(&image.bytes),
            "decoding": decoding,
        });
        self.get_or_compute(d, |b| b.describe(image, system_prompt, user_prompt, decoding))
    }
}

impl<B: TextChatBackend> TextChatBackend for Cached<B> {
    fn model_id(&self) -> &str {
        self.inner.model_id()
    }

    fn complete(&self, system_prompt: &str, user_prompt: &str, decoding: &DecodingParams) -> Result<String, BackendError> {
        let d = json!({
            "role": "complete",
            "model": self.inner.model_id(),
            "system": system_prompt,
            "user": user_prompt,
            "decoding": decoding,
        });
        self.get_or_compute(d, |b| b.complete(system_prompt, user_prompt, decoding))
    }
}
