//! Shared process state for the CLI and the service: configuration, the
//! slide library, backends and lazily built embedding indexes.

use std::collections::HashMap;
use std::path::PathBuf;
use std::sync::{Arc, Mutex};

use thiserror::Error;

use crate::config::AppConfig;
use crate::metrics::{majority_vote_baseline, AnswerRunner, QaRecord, QuestionKind, RunnerAnswer};
use crate::navigator::{load_or_build_index, NavigatorError, PatchEmbeddingIndex};
use crate::orchestrator::{run_session, Backends, JsonlSink, SessionOptions};
use crate::slide_store::{SlideBundle, SlideLibrary};

#[derive(Debug, Error)]
pub enum RuntimeError {
    #[error("unknown slide {0:?}")]
    UnknownSlide(String),
    #[error(transparent)]
    Navigator(#[from] NavigatorError),
}

pub struct Runtime {
    pub config: AppConfig,
    pub library: SlideLibrary,
    pub backends: Backends,
    indexes: Mutex<HashMap<(String, u32), Arc<PatchEmbeddingIndex>>>,
}

impl Runtime {
    pub fn new(config: AppConfig, library: SlideLibrary, backends: Backends) -> Self {
        Self {
            config,
            library,
            backends,
            indexes: Mutex::new(HashMap::new()),
        }
    }

    pub fn bundle(&self, slide_id: &str) -> Result<Arc<SlideBundle>, RuntimeError> {
        self.library
            .get(slide_id)
            .ok_or_else(|| RuntimeError::UnknownSlide(slide_id.to_string()))
    }

    /// The bundle and its index at the configured starting magnification.
    pub fn slide(&self, slide_id: &str) -> Result<(Arc<SlideBundle>, Arc<PatchEmbeddingIndex>), RuntimeError> {
        self.slide_at(slide_id, self.config.session.initial_magnification)
    }

    /// The bundle and its index at `magnification`, building and persisting
    /// the index on first use.
    pub fn slide_at(
        &self,
        slide_id: &str,
        magnification: u32,
    ) -> Result<(Arc<SlideBundle>, Arc<PatchEmbeddingIndex>), RuntimeError> {
        let bundle = self.bundle(slide_id)?;
        // Held across the build so two callers never embed the same level.
        let mut cache = self.indexes.lock().unwrap_or_else(|e| e.into_inner());
        let key = (slide_id.to_string(), magnification);
        if let Some(index) = cache.get(&key) {
            return Ok((bundle, index.clone()));
        }
        let index = Arc::new(load_or_build_index(
            &bundle,
            magnification,
            &*self.backends.embedder,
            self.config.embed_workers,
        )?);
        cache.insert(key, index.clone());
        Ok((bundle, index))
    }
}

/// Answers each record with a full agent session, writing the trajectory
/// to `{trajectory_dir}/{record id}.jsonl`.
pub struct AgentRunner<'a> {
    pub runtime: &'a Runtime,
    pub trajectory_dir: PathBuf,
}

impl AnswerRunner for AgentRunner<'_> {
    fn answer(&self, record: &QaRecord) -> Result<RunnerAnswer, String> {
        let rt = self.runtime;
        let (bundle, index) = rt.slide(&record.slide_id).map_err(|e| e.to_string())?;
        let path = self.trajectory_dir.join(format!("{}.jsonl", record.id));
        let sink = JsonlSink::create(&path).map_err(|e| format!("{}: {e}", path.display()))?;
        let opts = SessionOptions {
            session_id: Some(record.id.clone()),
            sinks: vec![Box::new(sink)],
            decoding: rt.config.decoding.clone(),
            ..SessionOptions::default()
        };
        let options = match record.kind {
            QuestionKind::Closed => record.options.clone(),
            QuestionKind::Open => Vec::new(),
        };
        let t = run_session(
            bundle,
            index,
            rt.backends.clone(),
            &record.question,
            &options,
            rt.config.session.clone(),
            opts,
        )
        .map_err(|e| e.to_string())?;
        let answer = t
            .final_answer
            .map(|f| f.answer.answer)
            .ok_or_else(|| "session ended without a final answer".to_string())?;
        Ok(RunnerAnswer {
            answer,
            trajectory_path: Some(path),
        })
    }
}

/// Patch-level majority vote over the most relevant patches.
pub struct VoteRunner<'a> {
    pub runtime: &'a Runtime,
    pub n_patches: usize,
}

impl AnswerRunner for VoteRunner<'_> {
    fn answer(&self, record: &QaRecord) -> Result<RunnerAnswer, String> {
        let rt = self.runtime;
        let (bundle, index) = rt.slide(&record.slide_id).map_err(|e| e.to_string())?;
        let out = majority_vote_baseline(
            &bundle,
            &index,
            &record.question,
            &record.options,
            &*rt.backends.embedder,
            &*rt.backends.perceptor,
            self.n_patches,
            rt.config.session.describe_concurrency,
        )
        .map_err(|e| e.to_string())?;
        for w in &out.warnings {
            tracing::warn!(record = %record.id, "{w}");
        }
        Ok(RunnerAnswer {
            answer: out.answer,
            trajectory_path: None,
        })
    }
}
