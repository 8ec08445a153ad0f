use std::collections::{BTreeMap, BTreeSet};
use std::io;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::events::{system_clock, Clock, Event, EventBody, EventSink, Trajectory};
use super::intervention::{Intervention, InterventionError, InterventionRecord, PatchRef};
use super::{merge_states, ActionKind, ActionRecord, AnalyticState, ForcedReason, SessionConfig, StateEntry};
use crate::backends::{DecodingParams, EmbeddingBackend, TextChatBackend, VisionChatBackend};
use crate::executor::{
    Exchange, Executor, ExecutorError, MissingInfoDirective, PredictedAnswer, StateRendering, SufficiencyVerdict,
};
use crate::navigator::{
    guided_sample, k_schedule_with, score, select_magnified, ExclusionSet, LazyEmbeddings, NavigatorError,
    PatchEmbeddingIndex, RelevanceScore, Sample,
};
use crate::perceptor::{Perceptor, PerceptorError, UNAVAILABLE_DESCRIPTION};
use crate::slide_store::{GridLoc, SlideBundle, SlideError};

#[derive(Clone)]
pub struct Backends {
    pub embedder: Arc<dyn EmbeddingBackend>,
    pub perceptor: Arc<dyn VisionChatBackend>,
    pub executor: Arc<dyn TextChatBackend>,
}

pub struct SessionOptions {
    /// Random UUID when absent.
    pub session_id: Option<String>,
    pub clock: Clock,
    pub sinks: Vec<Box<dyn EventSink>>,
    pub decoding: DecodingParams,
}

impl Default for SessionOptions {
    fn default() -> Self {
        Self {
            session_id: None,
            clock: system_clock(),
            sinks: Vec::new(),
            decoding: DecodingParams::default(),
        }
    }
}

#[derive(Debug, Error)]
pub enum SessionError {
    #[error("invalid session config: {0}")]
    Config(String),
    #[error(transparent)]
    Slide(#[from] SlideError),
    #[error(transparent)]
    Navigator(#[from] NavigatorError),
    #[error(transparent)]
    Perceptor(#[from] PerceptorError),
    #[error(transparent)]
    Executor(#[from] ExecutorError),
    #[error("event log write failed: {0}")]
    Sink(#[from] io::Error),
    #[error("session is already {0}")]
    Terminal(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Running,
    Paused,
    AwaitingIntervention,
    Done,
    Failed,
}

impl SessionStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, SessionStatus::Done | SessionStatus::Failed)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            SessionStatus::Running => "running",
            SessionStatus::Paused => "paused",
            SessionStatus::AwaitingIntervention => "awaiting_intervention",
            SessionStatus::Done => "done",
            SessionStatus::Failed => "failed",
        }
    }
}

/// Where an interactive session is waiting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Checkpoint {
    /// Nothing sampled yet.
    BeforeSampling,
    /// Findings chosen, descriptions not yet requested.
    PostSampling,
    /// Reasoning done, next action pending.
    PostReasoning,
    /// A human asked to finalize; resuming synthesizes the answer.
    BeforeFinal,
}

#[derive(Debug, Clone, PartialEq)]
enum Plan {
    Conclude,
    Zoom(u32),
    Explore,
    Forced(ForcedReason),
}

#[derive(Debug, Clone, PartialEq)]
struct Pending {
    predicted: PredictedAnswer,
    verdict: SufficiencyVerdict,
    directive: Option<MissingInfoDirective>,
    warnings: Vec<String>,
    exchanges: Vec<Exchange>,
    plan: Plan,
}

#[derive(Debug, Clone, PartialEq)]
enum Phase {
    BeforeSampling,
    PostSampling,
    Reasoning,
    PostReasoning(Box<Pending>),
    Finalizing,
    Done,
    Failed,
}

/// A single analysis session, advanced step by step.
pub struct Session {
    id: String,
    bundle: Arc<SlideBundle>,
    index: Arc<PatchEmbeddingIndex>,
    backends: Backends,
    question: String,
    options: Vec<String>,
    config: SessionConfig,
    clock: Clock,
    sinks: Vec<Box<dyn EventSink>>,
    decoding: DecodingParams,

    phase: Phase,
    paused: bool,
    t: u32,
    query: String,
    states: Vec<AnalyticState>,
    findings: Vec<Vec<RelevanceScore>>,
    exclusion: ExclusionSet,
    zoom_embeddings: BTreeMap<u32, LazyEmbeddings>,
    magnification_override: Option<u32>,
    pending_notes: Vec<StateEntry>,
    rationales: Vec<String>,
    events: Vec<Event>,
}

impl Session {
    pub fn new(
        bundle: Arc<SlideBundle>,
        index: Arc<PatchEmbeddingIndex>,
        backends: Backends,
        question: impl Into<String>,
        options: Vec<String>,
        config: SessionConfig,
        opts: SessionOptions,
    ) -> Result<Self, SessionError> {
        config.validate().map_err(SessionError::Config)?;
        let base = config.initial_magnification;
        bundle.level(base)?;
        if index.magnification != base || index.slide_id != bundle.slide_id() {
            return Err(SessionError::Config(format!(
                "index is for {}@{}x, session needs {}@{base}x",
                index.slide_id,
                index.magnification,
                bundle.slide_id()
            )));
        }
        let question = question.into();
        let mut session = Self {
            id: opts.session_id.unwrap_or_else(|| uuid::Uuid::new_v4().to_string()),
            bundle,
            index,
            backends,
            query: question.clone(),
            question,
            options,
            paused: config.interactive,
            config,
            clock: opts.clock,
            sinks: opts.sinks,
            decoding: opts.decoding,
            phase: Phase::BeforeSampling,
            t: 0,
            states: Vec::new(),
            findings: Vec::new(),
            exclusion: ExclusionSet::new(),
            zoom_embeddings: BTreeMap::new(),
            magnification_override: None,
            pending_notes: Vec::new(),
            rationales: Vec::new(),
            events: Vec::new(),
        };
        session.emit(EventBody::SessionStart {
            session_id: session.id.clone(),
            slide_id: session.bundle.slide_id().to_string(),
            question: session.question.clone(),
            options: session.options.clone(),
            config: session.config.clone(),
        })?;
        Ok(session)
    }

    pub fn id(&self) -> &str {
        &self.id
    }

    pub fn question(&self) -> &str {
        &self.question
    }

    pub fn config(&self) -> &SessionConfig {
        &self.config
    }

    pub fn bundle(&self) -> &Arc<SlideBundle> {
        &self.bundle
    }

    pub fn iteration(&self) -> u32 {
        self.t
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn states(&self) -> &[AnalyticState] {
        &self.states
    }

    /// Findings of the current iteration.
    pub fn current_findings(&self) -> &[RelevanceScore] {
        self.findings.last().map_or(&[], Vec::as_slice)
    }

    pub fn trajectory(&self) -> Trajectory {
        Trajectory::from_events(&self.events).expect("a session's own event log is consistent")
    }

    pub fn status(&self) -> SessionStatus {
        match (&self.phase, self.paused) {
            (Phase::Done, _) => SessionStatus::Done,
            (Phase::Failed, _) => SessionStatus::Failed,
            (Phase::PostReasoning(_), true) => SessionStatus::AwaitingIntervention,
            (_, true) => SessionStatus::Paused,
            (_, false) => SessionStatus::Running,
        }
    }

    pub fn checkpoint(&self) -> Option<Checkpoint> {
        if !self.paused {
            return None;
        }
        match self.phase {
            Phase::BeforeSampling => Some(Checkpoint::BeforeSampling),
            Phase::PostSampling => Some(Checkpoint::PostSampling),
            Phase::PostReasoning(_) => Some(Checkpoint::PostReasoning),
            Phase::Finalizing => Some(Checkpoint::BeforeFinal),
            _ => None,
        }
    }

    fn is_checkpoint(&self) -> bool {
        matches!(
            self.phase,
            Phase::BeforeSampling | Phase::PostSampling | Phase::PostReasoning(_)
        )
    }

    fn emit(&mut self, body: EventBody) -> io::Result<()> {
        let event = Event {
            seq: self.events.len() as u64,
            at: (self.clock)(),
            body,
        };
        let mut result = Ok(());
        for sink in &mut self.sinks {
            if let Err(e) = sink.emit(&event) {
                result = Err(e);
            }
        }
        self.events.push(event);
        result
    }

    fn emit_state(&mut self, iteration: u32) -> io::Result<()> {
        let i = iteration as usize - 1;
        self.emit(EventBody::State {
            iteration,
            state: self.states[i].clone(),
            findings: self.findings[i].clone(),
        })
    }

    /// Runs until the next checkpoint (interactive) or the end.
    pub fn resume(&mut self) -> Result<SessionStatus, SessionError> {
        loop {
            self.step()?;
            if self.status().is_terminal() {
                return Ok(self.status());
            }
            if self.config.interactive && self.is_checkpoint() {
                self.paused = true;
                return Ok(self.status());
            }
        }
    }

    /// Runs to completion, ignoring checkpoints.
    pub fn run_to_end(&mut self) -> Result<SessionStatus, SessionError> {
        while !self.status().is_terminal() {
            self.step()?;
        }
        Ok(self.status())
    }

    /// Performs one transition. A failure marks the session failed and is
    /// recorded in the event log.
    pub fn step(&mut self) -> Result<(), SessionError> {
        match self.phase {
            Phase::Done => return Err(SessionError::Terminal("done")),
            Phase::Failed => return Err(SessionError::Terminal("failed")),
            _ => {}
        }
        self.paused = false;
        let result = self.advance();
        if let Err(e) = &result {
            let exchange = match e {
                SessionError::Executor(x) => x.exchange().cloned(),
                _ => None,
            };
            tracing::error!(session = %self.id, error = %e, "session failed");
            self.phase = Phase::Failed;
            let iteration = (self.t > 0).then_some(self.t);
            if let Err(sink) = self.emit(EventBody::Error {
                message: e.to_string(),
                iteration,
                exchange,
            }) {
                tracing::error!(session = %self.id, error = %sink, "could not record failure");
            }
        }
        result
    }

    fn base_count(&self) -> usize {
        self.index.count()
    }

    fn k_for(&self, t: u32) -> usize {
        k_schedule_with(self.base_count(), t, self.config.k1_fraction, self.config.kt_fraction)
    }

    fn advance(&mut self) -> Result<(), SessionError> {
        match std::mem::replace(&mut self.phase, Phase::Failed) {
            Phase::BeforeSampling => {
                let sample = guided_sample(
                    &self.bundle,
                    &self.index,
                    &self.question,
                    &self.exclusion,
                    self.k_for(1),
                    &*self.backends.embedder,
                    1,
                )?;
                match sample {
                    Sample::Found(x) => self.begin_iteration(1, x)?,
                    Sample::Exhausted => unreachable!("a validated bundle has at least one patch"),
                }
            }
            Phase::PostSampling => {
                self.describe_current()?;
                self.phase = Phase::Reasoning;
            }
            Phase::Reasoning => {
                let pending = self.reason()?;
                self.phase = Phase::PostReasoning(Box::new(pending));
            }
            Phase::PostReasoning(pending) => self.apply(*pending)?,
            Phase::Finalizing => self.finalize()?,
            Phase::Done | Phase::Failed => unreachable!("checked in step"),
        }
        Ok(())
    }

    fn begin_iteration(&mut self, t: u32, findings: Vec<RelevanceScore>) -> io::Result<()> {
        self.t = t;
        let mut state = AnalyticState::new(t);
        for note in self.pending_notes.drain(..) {
            state.push(note);
        }
        self.states.push(state);
        self.findings.push(findings);
        self.phase = Phase::PostSampling;
        self.emit_state(t)
    }

    fn describe_current(&mut self) -> Result<(), SessionError> {
        let i = self.t as usize - 1;
        let patches: Vec<_> = self.findings[i].iter().map(|r| r.patch.clone()).collect();
        let items = Perceptor::new(&*self.backends.perceptor)
            .with_decoding(self.decoding.clone())
            .with_concurrency(self.config.describe_concurrency)
            .describe_batch(&self.bundle, &patches, &self.question, self.config.top_m_guided)?;
        for item in items {
            self.exclusion.insert(&item.patch);
            let description = match item.result {
                Ok(d) => d.text,
                Err(e) => {
                    tracing::warn!(session = %self.id, error = %e, "description unavailable");
                    UNAVAILABLE_DESCRIPTION.to_string()
                }
            };
            self.states[i].push(StateEntry::Patch {
                patch: item.patch,
                description,
                prompt_kind: item.prompt_kind,
                edited: false,
            });
        }
        self.emit_state(self.t)?;
        Ok(())
    }

    fn rendering_for(&self, t: u32) -> StateRendering {
        let mut r = StateRendering::new(&self.question, t).with_options(&self.options);
        for s in &self.states[..t as usize] {
            for note in s.notes() {
                r.push_note(note);
            }
        }
        self.states[t as usize - 1].render_into(&mut r);
        r.prior_rationales = self.rationales.clone();
        r
    }

    fn executor(&self) -> Executor<'_> {
        Executor::new(&*self.backends.executor).with_decoding(self.decoding.clone())
    }

    fn reason(&mut self) -> Result<Pending, SessionError> {
        let t = self.t;
        let rendering = self.rendering_for(t);
        let exec = self.executor();
        let mut exchanges = Vec::new();
        let mut warnings = Vec::new();

        let predicted = exec.predict_answer(&rendering)?;
        exchanges.push(predicted.exchange);
        let predicted = predicted.value;
        let verdict = exec.self_reflect(&rendering, &predicted)?;
        exchanges.push(verdict.exchange);
        let verdict = verdict.value;

        let (directive, plan) = if verdict.sufficient {
            (None, Plan::Conclude)
        } else {
            let base = self.config.initial_magnification;
            let levels = self.bundle.magnifications();
            let directive = match exec.explore_missing_info(&rendering, &predicted, base, &levels) {
                Ok(reply) => {
                    warnings.extend(reply.warnings);
                    exchanges.push(reply.exchange);
                    reply.value
                }
                Err(ExecutorError::ContractViolation {
                    message,
                    degraded,
                    exchange,
                }) => {
                    tracing::warn!(session = %self.id, %message, "zoom directive unusable, exploring instead");
                    warnings.push(format!("{message}; exploring instead"));
                    exchanges.push(*exchange);
                    *degraded
                }
                Err(e) => return Err(e.into()),
            };
            let plan = match directive.recommended_zoom_level {
                Some(level) if directive.zoom_recommendation => Plan::Zoom(level),
                _ if t >= self.config.max_iterations => Plan::Forced(ForcedReason::MaxIterations),
                _ => Plan::Explore,
            };
            (Some(directive), plan)
        };
        self.rationales.push(format!(
            "Iteration {t}: answer: {}; reasoning: {}",
            predicted.answer, predicted.thinking_steps
        ));
        Ok(Pending {
            predicted,
            verdict,
            directive,
            warnings,
            exchanges,
            plan,
        })
    }

    fn record(&mut self, pending: Pending, action: ActionKind, reason: Option<ForcedReason>) -> ActionRecord {
        ActionRecord {
            iteration: self.t,
            action,
            reason,
            directive: pending.directive,
            predicted: pending.predicted,
            verdict: pending.verdict,
            zoom_level: None,
            zoomed: Vec::new(),
            warnings: pending.warnings,
            exchanges: pending.exchanges,
        }
    }

    fn apply(&mut self, pending: Pending) -> Result<(), SessionError> {
        match pending.plan.clone() {
            Plan::Conclude => {
                let record = self.record(pending, ActionKind::Conclude, None);
                self.emit(EventBody::Action { record })?;
                self.phase = Phase::Finalizing;
            }
            Plan::Forced(reason) => {
                let record = self.record(pending, ActionKind::ForcedConclude, Some(reason));
                self.emit(EventBody::Action { record })?;
                self.phase = Phase::Finalizing;
            }
            Plan::Zoom(level) => {
                let level = self.magnification_override.take().unwrap_or(level);
                let query = pending
                    .directive
                    .as_ref()
                    .map(|d| d.missing_info.clone())
                    .unwrap_or_default();
                let mut record = self.record(pending, ActionKind::Zoom, None);
                let (zoomed, warnings) = self.zoom(level, &query)?;
                record.zoom_level = Some(level);
                record.zoomed = zoomed;
                record.warnings.extend(warnings);
                self.emit(EventBody::Action { record })?;
                self.phase = Phase::Finalizing;
            }
            Plan::Explore => {
                let query = pending
                    .directive
                    .as_ref()
                    .map(|d| d.missing_info.clone())
                    .unwrap_or_default();
                let next = self.t + 1;
                let sample = guided_sample(
                    &self.bundle,
                    &self.index,
                    &query,
                    &self.exclusion,
                    self.k_for(next),
                    &*self.backends.embedder,
                    next,
                )?;
                match sample {
                    Sample::Exhausted => {
                        let record = self.record(pending, ActionKind::ForcedConclude, Some(ForcedReason::PoolExhausted));
                        self.emit(EventBody::Action { record })?;
                        self.phase = Phase::Finalizing;
                    }
                    Sample::Found(x) => {
                        let record = self.record(pending, ActionKind::Explore, None);
                        self.emit(EventBody::Action { record })?;
                        self.query = query;
                        self.begin_iteration(next, x)?;
                    }
                }
            }
        }
        Ok(())
    }

    /// Magnifies every current finding to `level`, keeps the best children
    /// for `query` and adds their descriptions to the current state.
    fn zoom(&mut self, level: u32, query: &str) -> Result<(Vec<RelevanceScore>, Vec<String>), SessionError> {
        let i = self.t as usize - 1;
        let mut children = Vec::new();
        for r in &self.findings[i] {
            children.extend(self.bundle.magnify_patch(&r.patch, level)?);
        }
        children.retain(|c| !self.exclusion.contains(c));
        let lazy = self
            .zoom_embeddings
            .entry(level)
            .or_insert_with(|| LazyEmbeddings::new(level));
        let chosen = select_magnified(
            &self.bundle,
            lazy,
            &children,
            query,
            &*self.backends.embedder,
            self.config.zoom_patch_count,
            self.t,
        )?;
        let perceptor = Perceptor::new(&*self.backends.perceptor).with_decoding(self.decoding.clone());
        let mut warnings = Vec::new();
        for c in &chosen {
            self.exclusion.insert(&c.patch);
            let (description, prompt_kind) = match perceptor.describe_guided(&self.bundle, &c.patch, query) {
                Ok(d) => (d.text, d.prompt_kind),
                Err(e) => {
                    warnings.push(e.to_string());
                    (
                        UNAVAILABLE_DESCRIPTION.to_string(),
                        crate::perceptor::PromptKind::QuestionGuided,
                    )
                }
            };
            self.states[i].push(StateEntry::Patch {
                patch: c.patch.clone(),
                description,
                prompt_kind,
                edited: false,
            });
        }
        self.emit_state(self.t)?;
        Ok((chosen, warnings))
    }

    fn finalize(&mut self) -> Result<(), SessionError> {
        let merged = merge_states(&self.states);
        let mut r = StateRendering::new(&self.question, self.t).with_options(&self.options);
        for note in merged.notes() {
            r.push_note(note);
        }
        merged.render_into(&mut r);
        r.prior_rationales = self.rationales.clone();
        let reply = self.executor().final_answer(&r)?;
        self.emit(EventBody::Final {
            answer: reply.value,
            exchange: reply.exchange,
        })?;
        self.phase = Phase::Done;
        Ok(())
    }

    /// Validates and applies a human action. Rejected actions leave the
    /// session untouched.
    pub fn apply_intervention(
        &mut self,
        intervention: Intervention,
        author: &str,
    ) -> Result<InterventionRecord, InterventionError> {
        let status = self.status();
        if !self.paused || status.is_terminal() {
            return Err(InterventionError::NotPaused(status.as_str().into()));
        }
        let kind = intervention.kind();
        let invalid = |message: String| InterventionError::Invalid { kind, message };
        let base = self.config.initial_magnification;

        // Validate everything before touching state.
        let mut roi_findings = None;
        match &intervention {
            Intervention::SelectRois { patches } => {
                if !matches!(self.phase, Phase::BeforeSampling | Phase::PostSampling) {
                    return Err(invalid("only allowed before the findings are described".into()));
                }
                if patches.is_empty() {
                    return Err(invalid("patch list is empty".into()));
                }
                let mut seen = BTreeSet::new();
                let mut chosen = Vec::with_capacity(patches.len());
                for PatchRef { col, row } in patches {
                    if !seen.insert((*col, *row)) {
                        return Err(invalid(format!("patch ({col},{row}) listed twice")));
                    }
                    let patch = self
                        .bundle
                        .patch(base, GridLoc::new(*col, *row))
                        .map_err(|e| invalid(e.to_string()))?
                        .ok_or_else(|| invalid(format!("({col},{row}) is outside the {base}x grid")))?;
                    if self.exclusion.contains(&patch) {
                        return Err(invalid(format!("({col},{row}) was already examined")));
                    }
                    chosen.push(patch);
                }
                let iteration = self.t.max(1);
                let mut scored = score(&*self.index, &self.query, &*self.backends.embedder, &chosen, iteration)
                    .map_err(|e| invalid(format!("scoring failed: {e}")))?;
                scored.sort_by(|a, b| {
                    b.score
                        .total_cmp(&a.score)
                        .then(a.patch.patch_index.cmp(&b.patch.patch_index))
                });
                roi_findings = Some(scored);
            }
            Intervention::EditDescription {
                magnification,
                col,
                row,
                text,
            } => {
                if text.trim().is_empty() {
                    return Err(invalid("text is empty".into()));
                }
                let key = (*magnification, GridLoc::new(*col, *row));
                if !self.states.iter().any(|s| s.entries.iter().any(|e| e.key() == Some(key))) {
                    return Err(invalid(format!("no described patch at {magnification}x ({col},{row})")));
                }
            }
            Intervention::InjectNote { text } => {
                if text.trim().is_empty() {
                    return Err(invalid("note is empty".into()));
                }
            }
            Intervention::SetMagnification { magnification } => {
                if !self.bundle.has_level(*magnification) {
                    return Err(invalid(format!("slide has no {magnification}x level")));
                }
                if *magnification <= base {
                    return Err(invalid(format!(
                        "zoom target must exceed the current {base}x, got {magnification}x"
                    )));
                }
            }
            Intervention::Finalize => {
                if !matches!(self.phase, Phase::PostReasoning(_)) {
                    return Err(invalid("only allowed once an iteration has been reasoned over".into()));
                }
            }
        }

        let persist = |e: io::Error| InterventionError::Invalid {
            kind,
            message: format!("event log write failed: {e}"),
        };
        let record = InterventionRecord {
            at_iteration: self.t,
            author: author.to_string(),
            timestamp: (self.clock)(),
            intervention: intervention.clone(),
        };
        self.emit(EventBody::Intervention { record: record.clone() })
            .map_err(persist)?;

        match intervention {
            Intervention::SelectRois { .. } => {
                let findings = roi_findings.expect("validated above");
                if self.phase == Phase::BeforeSampling {
                    self.begin_iteration(1, findings).map_err(persist)?;
                } else {
                    let i = self.t as usize - 1;
                    self.findings[i] = findings;
                    self.emit_state(self.t).map_err(persist)?;
                }
            }
            Intervention::EditDescription {
                magnification,
                col,
                row,
                text,
            } => {
                let key = (magnification, GridLoc::new(col, row));
                let mut touched = Vec::new();
                for state in &mut self.states {
                    for e in &mut state.entries {
                        if e.key() == Some(key) {
                            if let StateEntry::Patch {
                                description, edited, ..
                            } = e
                            {
                                *description = text.clone();
                                *edited = true;
                            }
                            touched.push(state.iteration);
                        }
                    }
                }
                touched.dedup();
                for t in touched {
                    self.emit_state(t).map_err(persist)?;
                }
            }
            Intervention::InjectNote { text } => {
                let note = StateEntry::Note {
                    text,
                    author: author.to_string(),
                };
                if self.states.is_empty() {
                    self.pending_notes.push(note);
                } else {
                    let i = self.t as usize - 1;
                    self.states[i].push(note);
                    self.emit_state(self.t).map_err(persist)?;
                }
            }
            Intervention::SetMagnification { magnification } => {
                self.magnification_override = Some(magnification);
            }
            Intervention::Finalize => {
                let Phase::PostReasoning(pending) = std::mem::replace(&mut self.phase, Phase::Finalizing) else {
                    unreachable!("validated above")
                };
                let action = self.record(*pending, ActionKind::ForcedConclude, Some(ForcedReason::HumanFinalize));
                self.emit(EventBody::Action { record: action }).map_err(persist)?;
            }
        }
        Ok(record)
    }
}

/// Runs a non-interactive session to completion.
pub fn run_session(
    bundle: Arc<SlideBundle>,
    index: Arc<PatchEmbeddingIndex>,
    backends: Backends,
    question: &str,
    options: &[String],
    config: SessionConfig,
    opts: SessionOptions,
) -> Result<Trajectory, SessionError> {
    let config = SessionConfig {
        interactive: false,
        ..config
    };
    let mut session = Session::new(bundle, index, backends, question, options.to_vec(), config, opts)?;
    session.run_to_end()?;
    Ok(session.trajectory())
}
