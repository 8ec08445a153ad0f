//! Patch descriptions from the vision-language model.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::{DecodingParams, VisionChatBackend};
use crate::par::parallel_map;
use crate::slide_store::{Patch, PatchId, SlideBundle};

pub const PERCEPTOR_SYSTEM_PROMPT: &str = "A conversation between a curious user and an AI medical assistant specialized in pathology image analysis. The assistant can interpret pathology images, describe observed features, and provide possible explanations based on medical knowledge, but will never give a definitive diagnosis or prescribe treatment. The assistant must always maintain a polite, clear, and professional tone. All answers should be supported by established, reliable medical sources. The assistant should carefully consider visual details in pathology images, such as cell morphology, staining patterns, and tissue architecture.";

pub const GENERIC_DESCRIBE_PROMPT: &str = "Please describe the pathology features in this image.";

pub const GUIDED_DESCRIBE_TEMPLATE: &str =
    "Please describe the pathology features related to the question: [QUESTION] in this image.";

/// Text stored for a patch whose description could not be obtained.
pub const UNAVAILABLE_DESCRIPTION: &str = "[description unavailable]";

pub const DEFAULT_TOP_M: usize = 5;

/// Substitutes `question` verbatim for the `[QUESTION]` placeholder.
pub fn guided_prompt(question: &str) -> String {
    GUIDED_DESCRIBE_TEMPLATE.replacen("[QUESTION]", question, 1)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    Generic,
    QuestionGuided,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchDescription {
    pub patch: Patch,
    pub text: String,
    pub prompt_kind: PromptKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub question: Option<String>,
}

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum PerceptorError {
    #[error("description failed for {patch}: {reason}")]
    DescriptionFailed { patch: PatchId, reason: String },
    #[error("all {count} descriptions in the batch failed; first: {first}")]
    BatchFailed { count: usize, first: String },
}

/// One slot of a batch: the patch plus its description or failure.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchItem {
    pub patch: Patch,
    pub prompt_kind: PromptKind,
    pub result: Result<PatchDescription, PerceptorError>,
}

pub struct Perceptor<'a> {
    backend: &'a dyn VisionChatBackend,
    decoding: DecodingParams,
    concurrency: usize,
}

impl<'a> Perceptor<'a> {
    pub fn new(backend: &'a dyn VisionChatBackend) -> Self {
        Self {
            backend,
            decoding: DecodingParams::default(),
            concurrency: 4,
        }
    }

    pub fn with_decoding(mut self, decoding: DecodingParams) -> Self {
        self.decoding = decoding;
        self
    }

    pub fn with_concurrency(mut self, concurrency: usize) -> Self {
        self.concurrency = concurrency.max(1);
        self
    }

    fn run(
        &self,
        bundle: &SlideBundle,
        patch: &Patch,
        user_prompt: &str,
        kind: PromptKind,
        question: Option<&str>,
    ) -> Result<PatchDescription, PerceptorError> {
        let failed = |reason: String| PerceptorError::DescriptionFailed {
            patch: patch.id(),
            reason,
        };
        let tile = bundle.tile_bytes(patch).map_err(|e| failed(e.to_string()))?;
        let text = self
            .backend
            .describe(&tile, PERCEPTOR_SYSTEM_PROMPT, user_prompt, &self.decoding)
            .map_err(|e| failed(e.to_string()))?;
        if text.trim().is_empty() {
            return Err(failed("empty description".into()));
        }
        Ok(PatchDescription {
            patch: patch.clone(),
            text,
            prompt_kind: kind,
            question: question.map(str::to_string),
        })
    }

    pub fn describe(&self, bundle: &SlideBundle, patch: &Patch) -> Result<PatchDescription, PerceptorError> {
        self.run(bundle, patch, GENERIC_DESCRIBE_PROMPT, PromptKind::Generic, None)
    }

    pub fn describe_guided(
        &self,
        bundle: &SlideBundle,
        patch: &Patch,
        question: &str,
    ) -> Result<PatchDescription, PerceptorError> {
        self.run(
            bundle,
            patch,
            &guided_prompt(question),
            PromptKind::QuestionGuided,
            Some(question),
        )
    }

    /// Describes `patches` (given in descending relevance): the first
    /// `top_m` with the question-guided prompt, the rest generically.
    ///
    /// Individual failures stay in their slot; the batch only fails when
    /// every slot failed.
    pub fn describe_batch(
        &self,
        bundle: &SlideBundle,
        patches: &[Patch],
        question: &str,
        top_m: usize,
    ) -> Result<Vec<BatchItem>, PerceptorError> {
        let jobs: Vec<(usize, &Patch)> = patches.iter().enumerate().collect();
        let items = parallel_map(&jobs, self.concurrency, |(rank, patch)| {
            let (kind, result) = if *rank < top_m {
                (PromptKind::QuestionGuided, self.describe_guided(bundle, patch, question))
            } else {
                (PromptKind::Generic, self.describe(bundle, patch))
            };
            BatchItem {
                patch: (*patch).clone(),
                prompt_kind: kind,
                result,
            }
        });
        if !items.is_empty() && items.iter().all(|i| i.result.is_err()) {
            let first = items[0].result.as_ref().unwrap_err().to_string();
            return Err(PerceptorError::BatchFailed {
                count: items.len(),
                first,
            });
        }
        Ok(items)
    }
}
