//! Query-guided patch retrieval.
//!
//! Relevance is the cosine similarity between a text query embedding and
//! unit-normalized patch embeddings. Sampling takes the top `k` patches not
//! yet examined, highest score first, ties broken by ascending
//! `patch_index`.
//!
//! Per-level embeddings persist beside the bundle as
//! `embeddings/{mag}.bin` (little-endian `f32`, row-major, ordered by
//! `patch_index`) with an `embeddings/{mag}.json` header.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{check_embedding, BackendError, EmbeddingBackend};
use crate::par::parallel_map;
use crate::slide_store::{Patch, SlideBundle, SlideError};

#[derive(Debug, Error)]
pub enum NavigatorError {
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("embedding failed for {} patch(es) at {magnification}x: {failed:?} (first error: {first_error})", failed.len())]
    PartialIndex {
        magnification: u32,
        failed: Vec<u32>,
        first_error: String,
    },
    #[error("stale embedding index: built with model {found:?}, configured embedder is {expected:?}")]
    StaleIndex { found: String, expected: String },
    #[error("embedding index format: {0}")]
    Format(String),
    #[error("embedding index io: {0}")]
    Io(#[from] io::Error),
    #[error("no embedding for patch {patch_index} at {magnification}x")]
    MissingEmbedding { magnification: u32, patch_index: u32 },
    #[error("embedding dimension {found} does not match index dimension {expected}")]
    DimensionMismatch { found: usize, expected: usize },
}

/// Header written next to the binary vectors.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexHeader {
    pub slide_id: String,
    pub magnification: u32,
    pub model_id: String,
    pub dim: usize,
    pub count: usize,
    pub dtype: String,
}

const DTYPE: &str = "f32le";

/// Lookup of unit vectors by patch index at one level.
pub trait VectorSource {
    fn magnification(&self) -> u32;
    fn vector(&self, patch_index: u32) -> Option<&[f32]>;
}

/// Dense index over every patch of one magnification level.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchEmbeddingIndex {
    pub slide_id: String,
    pub magnification: u32,
    pub model_id: String,
    dim: usize,
    vectors: Vec<f32>,
}

impl VectorSource for PatchEmbeddingIndex {
    fn magnification(&self) -> u32 {
        self.magnification
    }

    fn vector(&self, patch_index: u32) -> Option<&[f32]> {
        let start = patch_index as usize * self.dim;
        self.vectors.get(start..start + self.dim)
    }
}

impl PatchEmbeddingIndex {
    /// Index over precomputed vectors, one per patch in row-major order.
    /// Each vector is normalized to unit length.
    pub fn from_vectors(
        slide_id: &str,
        magnification: u32,
        model_id: &str,
        vectors: &[Vec<f32>],
    ) -> Result<Self, NavigatorError> {
        let dim = vectors.first().map_or(0, Vec::len);
        let mut flat = Vec::with_capacity(dim * vectors.len());
        for v in vectors {
            if v.len() != dim {
                return Err(NavigatorError::DimensionMismatch { found: v.len(), expected: dim });
            }
            check_embedding(v)?;
            flat.extend(normalize(v));
        }
        Ok(Self {
            slide_id: slide_id.to_string(),
            magnification,
            model_id: model_id.to_string(),
            dim,
            vectors: flat,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn count(&self) -> usize {
        self.vectors.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn header(&self) -> IndexHeader {
        IndexHeader {
            slide_id: self.slide_id.clone(),
            magnification: self.magnification,
            model_id: self.model_id.clone(),
            dim: self.dim,
            count: self.count(),
            dtype: DTYPE.into(),
        }
    }

    pub fn paths(bundle: &SlideBundle, magnification: u32) -> (PathBuf, PathBuf) {
        let dir = bundle.root().join("embeddings");
        (
            dir.join(format!("{magnification}.bin")),
            dir.join(format!("{magnification}.json")),
        )
    }

    pub fn persist(&self, bundle: &SlideBundle) -> Result<(), NavigatorError> {
        let (bin, json) = Self::paths(bundle, self.magnification);
        fs::create_dir_all(bin.parent().expect("embeddings dir"))?;
        let mut bytes = Vec::with_capacity(self.vectors.len() * 4);
        for x in &self.vectors {
            bytes.extend_from_slice(&x.to_le_bytes());
        }
        fs::write(&bin, bytes)?;
        fs::write(
            &json,
            serde_json::to_vec_pretty(&self.header()).map_err(|e| NavigatorError::Format(e.to_string()))?,
        )?;
        Ok(())
    }

    /// Loads a persisted index; `Ok(None)` when none exists.
    pub fn load(bundle: &SlideBundle, magnification: u32, expected_model: &str) -> Result<Option<Self>, NavigatorError> {
        let (bin, json) = Self::paths(bundle, magnification);
        let raw_header = match fs::read(&json) {
            Ok(raw) => raw,
            Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(None),
            Err(e) => return Err(e.into()),
        };
        let header: IndexHeader =
            serde_json::from_slice(&raw_header).map_err(|e| NavigatorError::Format(format!("{}: {e}", json.display())))?;
        if header.model_id != expected_model {
            return Err(NavigatorError::StaleIndex {
                found: header.model_id,
                expected: expected_model.to_string(),
            });
        }
        let level = bundle.level(magnification)?;
        if header.dtype != DTYPE || header.magnification != magnification || header.slide_id != bundle.slide_id() {
            return Err(NavigatorError::Format(format!("header {} does not describe this level", json.display())));
        }
        if header.count != level.patch_count() || header.dim == 0 {
            return Err(NavigatorError::Format(format!(
                "header count {} does not cover the {} patches at {magnification}x",
                header.count,
                level.patch_count()
            )));
        }
        let bytes = fs::read(&bin)?;
        if bytes.len() != header.count * header.dim * 4 {
            return Err(NavigatorError::Format(format!(
                "{} holds {} bytes, expected {}",
                bin.display(),
                bytes.len(),
                header.count * header.dim * 4
            )));
        }
        let vectors = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Ok(Some(Self {
            slide_id: header.slide_id,
            magnification,
            model_id: header.model_id,
            dim: header.dim,
            vectors,
        }))
    }
}

/// Scales `v` to unit length, computed in `f64`.
pub fn normalize(v: &[f32]) -> Vec<f32> {
    let norm = v.iter().map(|x| (*x as f64) * (*x as f64)).sum::<f64>().sqrt();
    v.iter().map(|x| (*x as f64 / norm) as f32).collect()
}

fn embed_patch(bundle: &SlideBundle, patch: &Patch, embedder: &dyn EmbeddingBackend) -> Result<Vec<f32>, NavigatorError> {
    let tile = bundle.tile_bytes(patch)?;
    let v = embedder.embed_image(&tile)?;
    check_embedding(&v)?;
    Ok(normalize(&v))
}

/// Embeds every patch at `magnification` and persists the result.
pub fn build_index(
    bundle: &SlideBundle,
    magnification: u32,
    embedder: &dyn EmbeddingBackend,
    workers: usize,
) -> Result<PatchEmbeddingIndex, NavigatorError> {
    let patches = bundle.patches_at(magnification)?;
    let results = parallel_map(&patches, workers, |p| embed_patch(bundle, p, embedder));

    let mut failed = Vec::new();
    let mut first_error = None;
    let mut dim = None;
    let mut vectors = Vec::new();
    for (patch, r) in patches.iter().zip(results) {
        match r {
            Ok(v) => {
                let d = *dim.get_or_insert(v.len());
                if v.len() != d {
                    return Err(NavigatorError::DimensionMismatch { found: v.len(), expected: d });
                }
                vectors.extend_from_slice(&v);
            }
            Err(e) => {
                failed.push(patch.patch_index);
                first_error.get_or_insert_with(|| e.to_string());
            }
        }
    }
    if !failed.is_empty() {
        return Err(NavigatorError::PartialIndex {
            magnification,
            failed,
            first_error: first_error.unwrap_or_default(),
        });
    }
    let index = PatchEmbeddingIndex {
        slide_id: bundle.slide_id().to_string(),
        magnification,
        model_id: embedder.model_id().to_string(),
        dim: dim.unwrap_or(0),
        vectors,
    };
    index.persist(bundle)?;
    Ok(index)
}

/// Loads the persisted index for `magnification`, building it when absent.
pub fn load_or_build_index(
    bundle: &SlideBundle,
    magnification: u32,
    embedder: &dyn EmbeddingBackend,
    workers: usize,
) -> Result<PatchEmbeddingIndex, NavigatorError> {
    match PatchEmbeddingIndex::load(bundle, magnification, embedder.model_id())? {
        Some(index) => Ok(index),
        None => build_index(bundle, magnification, embedder, workers),
    }
}

/// Sparse embeddings filled on demand; used at zoom levels where only a
/// handful of children are ever scored.
#[derive(Debug, Clone, Default)]
pub struct LazyEmbeddings {
    magnification: u32,
    vectors: BTreeMap<u32, Vec<f32>>,
}

impl LazyEmbeddings {
    pub fn new(magnification: u32) -> Self {
        Self {
            magnification,
            vectors: BTreeMap::new(),
        }
    }

    pub fn from_index(index: &PatchEmbeddingIndex) -> Self {
        let mut lazy = Self::new(index.magnification);
        for i in 0..index.count() as u32 {
            if let Some(v) = index.vector(i) {
                lazy.vectors.insert(i, v.to_vec());
            }
        }
        lazy
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    /// Embeds whichever of `patches` are not yet present.
    pub fn ensure(
        &mut self,
        bundle: &SlideBundle,
        patches: &[Patch],
        embedder: &dyn EmbeddingBackend,
        workers: usize,
    ) -> Result<(), NavigatorError> {
        let missing: Vec<Patch> = patches
            .iter()
            .filter(|p| !self.vectors.contains_key(&p.patch_index))
            .cloned()
            .collect();
        let results = parallel_map(&missing, workers, |p| embed_patch(bundle, p, embedder));
        for (patch, r) in missing.iter().zip(results) {
            self.vectors.insert(patch.patch_index, r?);
        }
        Ok(())
    }
}

impl VectorSource for LazyEmbeddings {
    fn magnification(&self) -> u32 {
        self.magnification
    }

    fn vector(&self, patch_index: u32) -> Option<&[f32]> {
        self.vectors.get(&patch_index).map(Vec::as_slice)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceScore {
    pub patch: Patch,
    pub score: f64,
    pub iteration: u32,
}

/// Unit-length query vector for `query`.
pub fn embed_query(embedder: &dyn EmbeddingBackend, query: &str) -> Result<Vec<f32>, NavigatorError> {
    let v = embedder.embed_text(query)?;
    check_embedding(&v)?;
    Ok(normalize(&v))
}

/// Cosine of two vectors, accumulated in `f64`.
pub fn cosine(a: &[f32], b: &[f32]) -> f64 {
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (*x as f64, *y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    (dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0)
}

/// Scores each candidate against a query vector.
pub fn score_vector(
    source: &dyn VectorSource,
    query: &[f32],
    candidates: &[Patch],
    iteration: u32,
) -> Result<Vec<RelevanceScore>, NavigatorError> {
    candidates
        .iter()
        .map(|p| {
            let v = source
                .vector(p.patch_index)
                .filter(|_| p.magnification == source.magnification())
                .ok_or(NavigatorError::MissingEmbedding {
                    magnification: p.magnification,
                    patch_index: p.patch_index,
                })?;
            if v.len() != query.len() {
                return Err(NavigatorError::DimensionMismatch {
                    found: query.len(),
                    expected: v.len(),
                });
            }
            Ok(RelevanceScore {
                patch: p.clone(),
                score: cosine(query, v),
                iteration,
            })
        })
        .collect()
}

/// Scores each candidate against the text `query`.
pub fn score(
    source: &dyn VectorSource,
    query: &str,
    embedder: &dyn EmbeddingBackend,
    candidates: &[Patch],
    iteration: u32,
) -> Result<Vec<RelevanceScore>, NavigatorError> {
    let q = embed_query(embedder, query)?;
    score_vector(source, &q, candidates, iteration)
}

/// `⌈fraction · n⌉`, at least 1. A small tolerance keeps exact products
/// such as `0.05 · 60` from rounding up past the integer.
pub fn k_for_fraction(n: usize, fraction: f64) -> usize {
    let raw = fraction * n as f64;
    ((raw - 1e-9).ceil() as usize).max(1)
}

/// Patches to sample at iteration `t`: `⌈0.1n⌉` first, `⌈0.05n⌉` after.
pub fn k_schedule(n: usize, t: u32) -> usize {
    k_schedule_with(n, t, 0.10, 0.05)
}

pub fn k_schedule_with(n: usize, t: u32, first_fraction: f64, later_fraction: f64) -> usize {
    if t <= 1 {
        k_for_fraction(n, first_fraction)
    } else {
        k_for_fraction(n, later_fraction)
    }
}

/// Descending score, then ascending patch index.
fn rank_order(a: &(u32, f64), b: &(u32, f64)) -> std::cmp::Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Top `k` of `(patch_index, score)` pairs outside `excluded`.
pub fn rank_top_k(scores: &[(u32, f64)], excluded: &BTreeSet<u32>, k: usize) -> Vec<(u32, f64)> {
    let mut pool: Vec<(u32, f64)> = scores.iter().copied().filter(|(i, _)| !excluded.contains(i)).collect();
    pool.sort_by(rank_order);
    pool.truncate(k);
    pool
}

/// Patch indices already examined, per magnification level.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionSet {
    levels: BTreeMap<u32, BTreeSet<u32>>,
}

impl ExclusionSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, patch: &Patch) -> bool {
        self.levels.entry(patch.magnification).or_default().insert(patch.patch_index)
    }

    pub fn contains(&self, patch: &Patch) -> bool {
        self.levels
            .get(&patch.magnification)
            .is_some_and(|s| s.contains(&patch.patch_index))
    }

    pub fn at(&self, magnification: u32) -> BTreeSet<u32> {
        self.levels.get(&magnification).cloned().unwrap_or_default()
    }

    pub fn count_at(&self, magnification: u32) -> usize {
        self.levels.get(&magnification).map_or(0, BTreeSet::len)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Sample {
    Found(Vec<RelevanceScore>),
    /// Every patch of the level is already excluded.
    Exhausted,
}

/// Top-`k` unexamined patches of the index level for `query`.
///
/// The caller adds the returned patches to `exclusion`.
pub fn guided_sample(
    bundle: &SlideBundle,
    index: &PatchEmbeddingIndex,
    query: &str,
    exclusion: &ExclusionSet,
    k: usize,
    embedder: &dyn EmbeddingBackend,
    iteration: u32,
) -> Result<Sample, NavigatorError> {
    let excluded = exclusion.at(index.magnification);
    if excluded.len() >= index.count() {
        return Ok(Sample::Exhausted);
    }
    let q = embed_query(embedder, query)?;
    if q.len() != index.dim() {
        return Err(NavigatorError::DimensionMismatch {
            found: q.len(),
            expected: index.dim(),
        });
    }
    let scores: Vec<(u32, f64)> = (0..index.count() as u32)
        .filter(|i| !excluded.contains(i))
        .map(|i| (i, cosine(&q, index.vector(i).expect("dense index"))))
        .collect();
    let top = rank_top_k(&scores, &BTreeSet::new(), k.max(1));
    let mut out = Vec::with_capacity(top.len());
    for (i, s) in top {
        let patch = bundle
            .patch_by_index(index.magnification, i)?
            .ok_or(NavigatorError::MissingEmbedding {
                magnification: index.magnification,
                patch_index: i,
            })?;
        out.push(RelevanceScore {
            patch,
            score: s,
            iteration,
        });
    }
    Ok(Sample::Found(out))
}

/// Picks the `count` best children for `query`, embedding them on demand.
pub fn select_magnified(
    bundle: &SlideBundle,
    embeddings: &mut LazyEmbeddings,
    children: &[Patch],
    query: &str,
    embedder: &dyn EmbeddingBackend,
    count: usize,
    iteration: u32,
) -> Result<Vec<RelevanceScore>, NavigatorError> {
    embeddings.ensure(bundle, children, embedder, 4)?;
    let scored = score(embeddings, query, embedder, children, iteration)?;
    let pairs: Vec<(u32, f64)> = scored.iter().map(|s| (s.patch.patch_index, s.score)).collect();
    let top = rank_top_k(&pairs, &BTreeSet::new(), count.max(1));
    Ok(top
        .into_iter()
        .map(|(i, _)| {
            scored
                .iter()
                .find(|s| s.patch.patch_index == i)
                .cloned()
                .expect("ranked index comes from scored")
        })
        .collect())
}
