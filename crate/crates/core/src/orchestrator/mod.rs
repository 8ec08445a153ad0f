//! The iterative analysis loop, its trajectory record and human
//! interventions.

mod events;
mod intervention;
mod session;

use serde::{Deserialize, Serialize};

pub use events::{
    fixed_clock, load_trajectory, read_events, system_clock, Clock, ErrorRecord, Event, EventBody, EventSink,
    FinalRecord, IterationRecord, JsonlSink, MemorySink, Trajectory, TrajectoryError,
};
pub use intervention::{Intervention, InterventionError, InterventionRecord, PatchRef};
pub use session::{run_session, Backends, Checkpoint, Session, SessionError, SessionOptions, SessionStatus};

use crate::executor::{MissingInfoDirective, PredictedAnswer, StateRendering, SufficiencyVerdict, Exchange};
use crate::navigator::RelevanceScore;
use crate::perceptor::{PromptKind, UNAVAILABLE_DESCRIPTION};
use crate::slide_store::{GridLoc, Patch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionConfig {
    pub max_iterations: u32,
    pub initial_magnification: u32,
    pub k1_fraction: f64,
    pub kt_fraction: f64,
    pub top_m_guided: usize,
    pub zoom_patch_count: usize,
    pub interactive: bool,
    /// Parallel Perceptor calls per batch.
    pub describe_concurrency: usize,
}

impl Default for SessionConfig {
    fn default() -> Self {
        Self {
            max_iterations: 5,
            initial_magnification: 5,
            k1_fraction: 0.10,
            kt_fraction: 0.05,
            top_m_guided: 5,
            zoom_patch_count: 1,
            interactive: false,
            describe_concurrency: 4,
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.max_iterations < 1 {
            return Err("max_iterations must be at least 1".into());
        }
        let (k1, kt) = (self.k1_fraction, self.kt_fraction);
        if !(kt > 0.0 && kt <= k1 && k1 <= 1.0) {
            return Err(format!("need 0 < kt_fraction ({kt}) <= k1_fraction ({k1}) <= 1"));
        }
        if self.zoom_patch_count < 1 {
            return Err("zoom_patch_count must be at least 1".into());
        }
        Ok(())
    }
}

/// One piece of evidence in an analytic state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StateEntry {
    Patch {
        patch: Patch,
        description: String,
        prompt_kind: PromptKind,
        #[serde(default)]
        edited: bool,
    },
    /// Expert knowledge injected by a human; has no location.
    Note { text: String, author: String },
}

impl StateEntry {
    /// `(magnification, loc)` for patch entries.
    pub fn key(&self) -> Option<(u32, GridLoc)> {
        match self {
            StateEntry::Patch { patch, .. } => Some((patch.magnification, patch.loc)),
            StateEntry::Note { .. } => None,
        }
    }

    /// Magnification label: the level for patches, `"human"` for notes.
    pub fn magnification_tag(&self) -> String {
        match self {
            StateEntry::Patch { patch, .. } => format!("{}x", patch.magnification),
            StateEntry::Note { .. } => "human".into(),
        }
    }

    pub fn is_usable(&self) -> bool {
        match self {
            StateEntry::Patch { description, .. } => description != UNAVAILABLE_DESCRIPTION,
            StateEntry::Note { .. } => true,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AnalyticState {
    pub iteration: u32,
    pub entries: Vec<StateEntry>,
    /// Patch indices of the patch entries, most relevant first.
    pub relevance_order: Vec<u32>,
}

impl AnalyticState {
    pub fn new(iteration: u32) -> Self {
        Self {
            iteration,
            ..Self::default()
        }
    }

    pub fn push(&mut self, entry: StateEntry) {
        if let StateEntry::Patch { patch, .. } = &entry {
            self.relevance_order.push(patch.patch_index);
        }
        self.entries.push(entry);
    }

    pub fn patch_entries(&self) -> impl Iterator<Item = &StateEntry> {
        self.entries.iter().filter(|e| e.key().is_some())
    }

    pub fn notes(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().filter_map(|e| match e {
            StateEntry::Note { text, .. } => Some(text.as_str()),
            _ => None,
        })
    }

    /// Patch lines for the prompt; notes are added by the caller.
    pub fn render_into(&self, rendering: &mut StateRendering) {
        for e in &self.entries {
            if let StateEntry::Patch { patch, description, .. } = e {
                rendering.push_entry(patch.magnification, patch.loc, description);
            }
        }
    }
}

/// Union of `states` in chronological order. A patch seen twice keeps the
/// later description, at the later position.
pub fn merge_states(states: &[AnalyticState]) -> AnalyticState {
    let mut merged = AnalyticState::new(states.last().map_or(0, |s| s.iteration));
    let mut entries: Vec<StateEntry> = Vec::new();
    for state in states {
        for e in &state.entries {
            if let Some(key) = e.key() {
                entries.retain(|prev| prev.key() != Some(key));
            }
            entries.push(e.clone());
        }
    }
    for e in entries {
        merged.push(e);
    }
    merged
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionKind {
    Explore,
    Zoom,
    Conclude,
    ForcedConclude,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForcedReason {
    MaxIterations,
    PoolExhausted,
    HumanFinalize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionRecord {
    pub iteration: u32,
    pub action: ActionKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<ForcedReason>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub directive: Option<MissingInfoDirective>,
    pub predicted: PredictedAnswer,
    pub verdict: SufficiencyVerdict,
    /// Level actually used by a zoom (after any override).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zoom_level: Option<u32>,
    /// Magnified patches chosen by a zoom.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub zoomed: Vec<RelevanceScore>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub warnings: Vec<String>,
    pub exchanges: Vec<Exchange>,
}

impl ActionRecord {
    pub fn terminates(&self) -> bool {
        self.action != ActionKind::Explore
    }
}
