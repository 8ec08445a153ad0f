use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// A grid location at the session's base magnification.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct PatchRef {
    pub col: u32,
    pub row: u32,
}

/// A human action on a paused session.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "payload", rename_all = "snake_case", deny_unknown_fields)]
pub enum Intervention {
    /// Replace the pending findings with these base-level patches.
    SelectRois { patches: Vec<PatchRef> },
    /// Rewrite the description of an already described patch.
    EditDescription {
        magnification: u32,
        col: u32,
        row: u32,
        text: String,
    },
    InjectNote { text: String },
    /// Target level for the next zoom.
    SetMagnification { magnification: u32 },
    Finalize,
}

impl Intervention {
    pub fn kind(&self) -> &'static str {
        match self {
            Intervention::SelectRois { .. } => "select_rois",
            Intervention::EditDescription { .. } => "edit_description",
            Intervention::InjectNote { .. } => "inject_note",
            Intervention::SetMagnification { .. } => "set_magnification",
            Intervention::Finalize => "finalize",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InterventionRecord {
    pub at_iteration: u32,
    pub author: String,
    pub timestamp: DateTime<Utc>,
    pub intervention: Intervention,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum InterventionError {
    #[error("session is not paused ({0})")]
    NotPaused(String),
    #[error("invalid {kind}: {message}")]
    Invalid { kind: &'static str, message: String },
}
