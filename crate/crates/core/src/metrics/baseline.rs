//! Patch-level majority voting: every retrieved patch answers on its own and
//! the most common answer wins.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{choose_option, normalize};
use crate::backends::{DecodingParams, EmbeddingBackend, VisionChatBackend};
use crate::executor::render_options;
use crate::navigator::{guided_sample, ExclusionSet, NavigatorError, PatchEmbeddingIndex, Sample};
use crate::par::parallel_map;
use crate::perceptor::PERCEPTOR_SYSTEM_PROMPT;
use crate::slide_store::{Patch, SlideBundle};

#[derive(Debug, Error)]
pub enum BaselineError {
    #[error(transparent)]
    Navigator(#[from] NavigatorError),
    #[error("every patch failed to answer; first error: {0}")]
    NoVotes(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchVote {
    pub patch: Patch,
    pub relevance: f64,
    pub raw: Option<String>,
    /// The option (closed) or normalized answer (open) this vote counts for.
    pub vote: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoteOutcome {
    pub answer: String,
    pub votes: Vec<PatchVote>,
    /// Vote count and summed relevance per answer.
    pub tally: BTreeMap<String, (usize, f64)>,
    pub warnings: Vec<String>,
}

pub fn vote_prompt(question: &str, options: &[String]) -> String {
    if options.is_empty() {
        format!("{question}\nAnswer briefly based on this image.")
    } else {
        format!("{question}\n{}\nAnswer with exactly one of the options.", render_options(options))
    }
}

/// Votes and summed relevance per answer.
type Tally = BTreeMap<String, (usize, f64)>;

/// Picks the modal vote; ties go to the larger summed relevance, then to
/// the earlier option (closed) or the earlier first vote (open).
fn winner(votes: &[PatchVote], options: &[String]) -> Option<(String, Tally)> {
    let mut tally = Tally::new();
    let mut first_seen: Vec<String> = Vec::new();
    for v in votes {
        if let Some(answer) = &v.vote {
            let slot = tally.entry(answer.clone()).or_insert((0, 0.0));
            slot.0 += 1;
            slot.1 += v.relevance;
            if !first_seen.contains(answer) {
                first_seen.push(answer.clone());
            }
        }
    }
    let order: Vec<&String> = if options.is_empty() {
        first_seen.iter().collect()
    } else {
        options.iter().filter(|o| tally.contains_key(*o)).collect()
    };
    let mut best: Option<(&String, usize, f64)> = None;
    for answer in order {
        let (n, rel) = tally[answer];
        let better = match best {
            None => true,
            Some((_, bn, brel)) => n > bn || (n == bn && rel > brel),
        };
        if better {
            best = Some((answer, n, rel));
        }
    }
    best.map(|(a, _, _)| (a.clone(), tally.clone()))
}

/// Answers `question` from the `n_patches` most relevant patches of the
/// indexed level.
#[allow(clippy::too_many_arguments)]
pub fn majority_vote_baseline(
    bundle: &SlideBundle,
    index: &PatchEmbeddingIndex,
    question: &str,
    options: &[String],
    embedder: &dyn EmbeddingBackend,
    vision: &dyn VisionChatBackend,
    n_patches: usize,
    concurrency: usize,
) -> Result<VoteOutcome, BaselineError> {
    let mut warnings = Vec::new();
    let available = index.count();
    if available < n_patches {
        warnings.push(format!(
            "only {available} patches at {}x; voting over all of them instead of {n_patches}",
            index.magnification
        ));
        tracing::warn!(slide = bundle.slide_id(), available, n_patches, "fewer patches than requested");
    }
    let picked = match guided_sample(bundle, index, question, &ExclusionSet::new(), n_patches, embedder, 1)? {
        Sample::Found(p) => p,
        Sample::Exhausted => Vec::new(),
    };
    let prompt = vote_prompt(question, options);
    let decoding = DecodingParams::default();
    let votes = parallel_map(&picked, concurrency, |scored| {
        let reply = bundle
            .tile_bytes(&scored.patch)
            .map_err(|e| e.to_string())
            .and_then(|tile| {
                vision
                    .describe(&tile, PERCEPTOR_SYSTEM_PROMPT, &prompt, &decoding)
                    .map_err(|e| e.to_string())
            });
        let (raw, error) = match reply {
            Ok(r) => (Some(r), None),
            Err(e) => (None, Some(e)),
        };
        let vote = raw.as_deref().and_then(|r| {
            if options.is_empty() {
                Some(normalize(r)).filter(|n| !n.is_empty())
            } else {
                choose_option(r, options).map(|i| options[i].clone())
            }
        });
        PatchVote {
            patch: scored.patch.clone(),
            relevance: scored.score,
            raw,
            vote,
            error,
        }
    });
    let failed: BTreeSet<_> = votes.iter().filter(|v| v.vote.is_none()).map(|v| v.patch.patch_index).collect();
    if !failed.is_empty() {
        warnings.push(format!("{} patch(es) gave no usable answer", failed.len()));
    }
    match winner(&votes, options) {
        Some((answer, tally)) => Ok(VoteOutcome {
            answer,
            votes,
            tally,
            warnings,
        }),
        None => Err(BaselineError::NoVotes(
            votes
                .iter()
                .find_map(|v| v.error.clone())
                .unwrap_or_else(|| "no answer mapped to a vote".into()),
        )),
    }
}
