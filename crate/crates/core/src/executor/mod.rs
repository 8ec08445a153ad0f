//! Text reasoning over the analytic state: answer prediction, sufficiency
//! reflection, missing-information exploration and final synthesis.

mod json;
pub mod prompts;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};
use thiserror::Error;

pub use json::{parse_json_object, JsonParseError};
use prompts::*;

use crate::backends::{BackendError, DecodingParams, TextChatBackend};
use crate::perceptor::UNAVAILABLE_DESCRIPTION;
use crate::slide_store::GridLoc;

/// Magnifications a zoom may target.
pub const ZOOM_LEVELS: [u32; 3] = [10, 20, 40];

pub fn render_entry(magnification: u32, loc: GridLoc, description: &str) -> String {
    format!("mag={magnification}x loc=({},{}): {description}", loc.col, loc.row)
}

pub fn render_options(options: &[String]) -> String {
    let mut out = String::from("Options:");
    for (i, opt) in options.iter().enumerate() {
        let letter = char::from(b'A' + (i % 26) as u8);
        let _ = write!(out, " {letter}) {opt}");
    }
    out
}

/// The serialized analytic state handed to the reasoning model.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateRendering {
    pub question: String,
    #[serde(default)]
    pub options: Vec<String>,
    /// Human notes, rendered ahead of the patch entries.
    #[serde(default)]
    pub notes: Vec<String>,
    pub entries: Vec<String>,
    pub iteration: u32,
    #[serde(default)]
    pub prior_rationales: Vec<String>,
}

impl StateRendering {
    pub fn new(question: impl Into<String>, iteration: u32) -> Self {
        Self {
            question: question.into(),
            iteration,
            ..Self::default()
        }
    }

    pub fn with_options(mut self, options: &[String]) -> Self {
        self.options = options.to_vec();
        self
    }

    /// Adds a patch line. Failed descriptions are left out of the prompt.
    pub fn push_entry(&mut self, magnification: u32, loc: GridLoc, description: &str) {
        if description != UNAVAILABLE_DESCRIPTION {
            self.entries.push(render_entry(magnification, loc, description));
        }
    }

    pub fn push_note(&mut self, note: impl Into<String>) {
        self.notes.push(note.into());
    }

    pub fn usable_entries(&self) -> usize {
        self.entries.len() + self.notes.len()
    }

    fn render(&self, with_rationales: bool) -> String {
        let mut out = String::from("Patch descriptions:\n");
        for note in &self.notes {
            let _ = writeln!(out, "[expert note] {note}");
        }
        for line in &self.entries {
            out.push_str(line);
            out.push('\n');
        }
        if with_rationales && !self.prior_rationales.is_empty() {
            out.push_str("\nPrevious reasoning:\n");
            for (i, r) in self.prior_rationales.iter().enumerate() {
                let _ = writeln!(out, "{}. {r}", i + 1);
            }
        }
        let _ = write!(out, "\nQuestion: {}", self.question);
        if !self.options.is_empty() {
            out.push('\n');
            out.push_str(&render_options(&self.options));
        }
        out
    }

    pub fn predict_prompt(&self) -> String {
        self.render(false)
    }

    pub fn reflect_prompt(&self, predicted: &PredictedAnswer) -> String {
        format!(
            "{}\n\nPredicted answer: {}\nThinking steps: {}",
            self.render(false),
            predicted.answer,
            predicted.thinking_steps
        )
    }

    pub fn explore_prompt(&self, predicted: &PredictedAnswer, current_magnification: u32) -> String {
        format!(
            "{}\n\nPredicted answer: {}\nThinking steps: {}\nCurrent magnification: {current_magnification}x",
            self.render(true),
            predicted.answer,
            predicted.thinking_steps
        )
    }

    pub fn final_prompt(&self) -> String {
        format!("{}\n\n{FINAL_ANSWER_FORMAT}", self.render(true))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PredictedAnswer {
    pub answer: String,
    pub thinking_steps: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SufficiencyVerdict {
    pub sufficient: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MissingInfoDirective {
    pub missing_info: String,
    pub zoom_recommendation: bool,
    pub recommended_zoom_level: Option<u32>,
    pub zoom_reason: String,
}

impl MissingInfoDirective {
    /// The normalized contract: a zoom names a valid level above `current`,
    /// an explore names none.
    pub fn is_normalized(&self, current: u32) -> bool {
        match (self.zoom_recommendation, self.recommended_zoom_level) {
            (true, Some(l)) => ZOOM_LEVELS.contains(&l) && l > current,
            (false, None) => true,
            _ => false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FinalAnswer {
    pub answer: String,
    pub reasoning_chain: String,
    pub iterations_used: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecutorStep {
    PredictAnswer,
    SelfReflect,
    ExploreMissingInfo,
    FinalAnswer,
}

impl std::fmt::Display for ExecutorStep {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            ExecutorStep::PredictAnswer => "predict_answer",
            ExecutorStep::SelfReflect => "self_reflect",
            ExecutorStep::ExploreMissingInfo => "explore_missing_info",
            ExecutorStep::FinalAnswer => "final_answer",
        })
    }
}

/// One prompt and every raw reply it received (two when a repair retry ran).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Exchange {
    pub step: ExecutorStep,
    pub user_prompt: String,
    pub responses: Vec<String>,
}

/// A parsed reply plus its exchange and any normalization warnings.
#[derive(Debug, Clone, PartialEq)]
pub struct Reply<T> {
    pub value: T,
    pub exchange: Exchange,
    pub warnings: Vec<String>,
}

#[derive(Debug, Error)]
pub enum ExecutorError {
    #[error("{step}: backend call failed: {source}")]
    Backend {
        step: ExecutorStep,
        #[source]
        source: BackendError,
    },
    #[error("{step}: unparseable reply after retry: {error}")]
    Parse {
        step: ExecutorStep,
        error: JsonParseError,
        exchange: Box<Exchange>,
    },
    #[error("{step}: {message}")]
    Protocol {
        step: ExecutorStep,
        message: String,
        exchange: Box<Exchange>,
    },
    /// Zoom requested without a usable level. `degraded` is the explore
    /// directive the caller should act on instead.
    #[error("explore_missing_info: {message}")]
    ContractViolation {
        message: String,
        degraded: Box<MissingInfoDirective>,
        exchange: Box<Exchange>,
    },
    #[error("{step}: state has no usable entries")]
    EmptyState { step: ExecutorStep },
}

impl ExecutorError {
    pub fn exchange(&self) -> Option<&Exchange> {
        match self {
            ExecutorError::Parse { exchange, .. }
            | ExecutorError::Protocol { exchange, .. }
            | ExecutorError::ContractViolation { exchange, .. } => Some(&**exchange),
            _ => None,
        }
    }
}

fn required_string(map: &Map<String, Value>, key: &str) -> Result<String, String> {
    match map.get(key) {
        Some(Value::String(s)) if !s.trim().is_empty() => Ok(s.clone()),
        Some(Value::String(_)) => Err(format!("\"{key}\" is empty")),
        Some(other) => Err(format!("\"{key}\" must be a string, got {other}")),
        None => Err(format!("missing key \"{key}\"")),
    }
}

fn yes_no(map: &Map<String, Value>, key: &str) -> Result<bool, String> {
    match map.get(key) {
        Some(Value::String(s)) if s.trim().eq_ignore_ascii_case("yes") => Ok(true),
        Some(Value::String(s)) if s.trim().eq_ignore_ascii_case("no") => Ok(false),
        Some(Value::Bool(b)) => Ok(*b),
        Some(other) => Err(format!("\"{key}\" must be \"Yes\" or \"No\", got {other}")),
        None => Err(format!("missing key \"{key}\"")),
    }
}

fn zoom_level(map: &Map<String, Value>) -> Result<Option<u32>, String> {
    let bad = |v: &Value| format!("\"recommended_zoom_level\" must be \"None\" or an integer, got {v}");
    match map.get("recommended_zoom_level") {
        None | Some(Value::Null) => Ok(None),
        Some(v @ Value::Number(n)) => match n.as_u64() {
            Some(l) => u32::try_from(l).map(Some).map_err(|_| bad(v)),
            None => match n.as_f64() {
                Some(f) if f.fract() == 0.0 && f > 0.0 && f <= u32::MAX as f64 => Ok(Some(f as u32)),
                _ => Err(bad(v)),
            },
        },
        Some(v @ Value::String(s)) => {
            let s = s.trim();
            if s.is_empty() || s.eq_ignore_ascii_case("none") || s.eq_ignore_ascii_case("null") {
                return Ok(None);
            }
            let digits = s.strip_suffix(['x', 'X']).unwrap_or(s).trim();
            digits.parse::<u32>().map(Some).map_err(|_| bad(v))
        }
        Some(v) => Err(bad(v)),
    }
}

/// Nearest level of [`ZOOM_LEVELS`] that `available` offers and that lies
/// strictly above `current`; ties go to the higher level.
pub fn clamp_zoom_level(requested: u32, current: u32, available: &[u32]) -> Option<u32> {
    ZOOM_LEVELS
        .iter()
        .copied()
        .filter(|l| *l > current && available.contains(l))
        .min_by_key(|l| (l.abs_diff(requested), std::cmp::Reverse(*l)))
}

pub struct Executor<'a> {
    backend: &'a dyn TextChatBackend,
    decoding: DecodingParams,
}

impl<'a> Executor<'a> {
    pub fn new(backend: &'a dyn TextChatBackend) -> Self {
        Self {
            backend,
            decoding: DecodingParams::default(),
        }
    }

    pub fn with_decoding(mut self, decoding: DecodingParams) -> Self {
        self.decoding = decoding;
        self
    }

    /// Sends the prompt, retrying once with a format reminder when the reply
    /// holds no parseable object.
    fn call(
        &self,
        step: ExecutorStep,
        system: &str,
        user_prompt: String,
    ) -> Result<(Map<String, Value>, Exchange), ExecutorError> {
        let mut exchange = Exchange {
            step,
            user_prompt,
            responses: Vec::with_capacity(1),
        };
        let send = |prompt: &str| {
            self.backend
                .complete(system, prompt, &self.decoding)
                .map_err(|source| ExecutorError::Backend { step, source })
        };
        let raw = send(&exchange.user_prompt)?;
        let first = parse_json_object(&raw);
        exchange.responses.push(raw);
        let error = match first {
            Ok(map) => return Ok((map, exchange)),
            Err(e) => e,
        };
        tracing::warn!(%step, %error, "malformed reply, retrying with format reminder");
        let raw = send(&format!("{}\n\n{FORMAT_REMINDER}", exchange.user_prompt))?;
        let second = parse_json_object(&raw);
        exchange.responses.push(raw);
        match second {
            Ok(map) => Ok((map, exchange)),
            Err(error) => Err(ExecutorError::Parse {
                step,
                error,
                exchange: Box::new(exchange),
            }),
        }
    }

    fn protocol(step: ExecutorStep, exchange: Exchange) -> impl FnOnce(String) -> ExecutorError {
        move |message| ExecutorError::Protocol {
            step,
            message,
            exchange: Box::new(exchange),
        }
    }

    fn parse_answer(
        step: ExecutorStep,
        map: &Map<String, Value>,
        exchange: &Exchange,
    ) -> Result<PredictedAnswer, ExecutorError> {
        let fields = required_string(map, "answer").and_then(|answer| {
            required_string(map, "thinking_steps").map(|thinking_steps| PredictedAnswer { answer, thinking_steps })
        });
        fields.map_err(Self::protocol(step, exchange.clone()))
    }

    pub fn predict_answer(&self, state: &StateRendering) -> Result<Reply<PredictedAnswer>, ExecutorError> {
        let step = ExecutorStep::PredictAnswer;
        if state.usable_entries() == 0 {
            return Err(ExecutorError::EmptyState { step });
        }
        let (map, exchange) = self.call(step, PREDICT_ANSWER_PROMPT, state.predict_prompt())?;
        let value = Self::parse_answer(step, &map, &exchange)?;
        Ok(Reply {
            value,
            exchange,
            warnings: Vec::new(),
        })
    }

    pub fn self_reflect(
        &self,
        state: &StateRendering,
        predicted: &PredictedAnswer,
    ) -> Result<Reply<SufficiencyVerdict>, ExecutorError> {
        let step = ExecutorStep::SelfReflect;
        let (map, exchange) = self.call(step, SELF_REFLECT_PROMPT, state.reflect_prompt(predicted))?;
        match yes_no(&map, "sufficient") {
            Ok(sufficient) => Ok(Reply {
                value: SufficiencyVerdict { sufficient },
                exchange,
                warnings: Vec::new(),
            }),
            Err(message) => Err(ExecutorError::Protocol {
                step,
                message,
                exchange: Box::new(exchange),
            }),
        }
    }

    /// Asks what evidence is missing. The returned directive is normalized
    /// against `current_magnification` and the slide's `available_levels`.
    pub fn explore_missing_info(
        &self,
        state: &StateRendering,
        predicted: &PredictedAnswer,
        current_magnification: u32,
        available_levels: &[u32],
    ) -> Result<Reply<MissingInfoDirective>, ExecutorError> {
        let step = ExecutorStep::ExploreMissingInfo;
        let (map, exchange) = self.call(
            step,
            EXPLORE_MISSING_INFO_PROMPT,
            state.explore_prompt(predicted, current_magnification),
        )?;
        let parsed = (|| {
            let missing_info = required_string(&map, "missing_info")?;
            let zoom = yes_no(&map, "zoom_recommendation")?;
            let level = zoom_level(&map)?;
            let zoom_reason = match map.get("zoom_reason") {
                None | Some(Value::Null) => String::new(),
                Some(Value::String(s)) => s.clone(),
                Some(other) => return Err(format!("\"zoom_reason\" must be a string, got {other}")),
            };
            Ok((missing_info, zoom, level, zoom_reason))
        })();
        let (missing_info, zoom, level, zoom_reason) = match parsed {
            Ok(p) => p,
            Err(message) => return Err(ExecutorError::Protocol { step, message, exchange: Box::new(exchange) }),
        };
        let mut directive = MissingInfoDirective {
            missing_info,
            zoom_recommendation: zoom,
            recommended_zoom_level: level,
            zoom_reason,
        };
        let mut warnings = Vec::new();
        match (zoom, level) {
            (false, None) => {}
            (false, Some(l)) => {
                warnings.push(format!("zoom not recommended but level {l} given; level dropped"));
                directive.recommended_zoom_level = None;
            }
            (true, requested) => {
                let clamped = requested.and_then(|l| clamp_zoom_level(l, current_magnification, available_levels));
                let valid = |l: u32| ZOOM_LEVELS.contains(&l) && l > current_magnification && available_levels.contains(&l);
                match (requested, clamped) {
                    (Some(l), _) if valid(l) => {}
                    (Some(l), Some(c)) => {
                        warnings.push(format!(
                            "zoom level {l} unusable at {current_magnification}x; clamped to {c}"
                        ));
                        directive.recommended_zoom_level = Some(c);
                    }
                    (requested, _) => {
                        let message = match requested {
                            None => "zoom recommended without a level".to_string(),
                            Some(l) => format!("zoom level {l} has no valid level above {current_magnification}x"),
                        };
                        directive.zoom_recommendation = false;
                        directive.recommended_zoom_level = None;
                        return Err(ExecutorError::ContractViolation {
                            message,
                            degraded: Box::new(directive),
                            exchange: Box::new(exchange),
                        });
                    }
                }
            }
        }
        for w in &warnings {
            tracing::warn!(%step, "{w}");
        }
        Ok(Reply {
            value: directive,
            exchange,
            warnings,
        })
    }

    /// Synthesizes the answer over the merged state and every rationale.
    pub fn final_answer(&self, merged: &StateRendering) -> Result<Reply<FinalAnswer>, ExecutorError> {
        let step = ExecutorStep::FinalAnswer;
        if merged.usable_entries() == 0 {
            return Err(ExecutorError::EmptyState { step });
        }
        let (map, exchange) = self.call(step, FINAL_ANSWER_PROMPT, merged.final_prompt())?;
        let p = Self::parse_answer(step, &map, &exchange)?;
        Ok(Reply {
            value: FinalAnswer {
                answer: p.answer,
                reasoning_chain: p.thinking_steps,
                iterations_used: merged.iteration,
            },
            exchange,
            warnings: Vec::new(),
        })
    }
}
