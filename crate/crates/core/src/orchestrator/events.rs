//! Line-delimited JSON event log and the trajectory rebuilt from it.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Write};
use std::path::Path;
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{ActionRecord, AnalyticState, InterventionRecord, SessionConfig};
use crate::executor::{Exchange, FinalAnswer};
use crate::navigator::RelevanceScore;

pub type Clock = Arc<dyn Fn() -> DateTime<Utc> + Send + Sync>;

pub fn system_clock() -> Clock {
    Arc::new(Utc::now)
}

/// A clock frozen at `at`; makes event logs byte-reproducible.
pub fn fixed_clock(at: DateTime<Utc>) -> Clock {
    Arc::new(move || at)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub seq: u64,
    pub at: DateTime<Utc>,
    #[serde(flatten)]
    pub body: EventBody,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EventBody {
    SessionStart {
        session_id: String,
        slide_id: String,
        question: String,
        #[serde(default)]
        options: Vec<String>,
        config: SessionConfig,
    },
    /// Full snapshot of iteration `iteration`; a later snapshot of the same
    /// iteration supersedes an earlier one.
    State {
        iteration: u32,
        state: AnalyticState,
        findings: Vec<RelevanceScore>,
    },
    Action {
        record: ActionRecord,
    },
    Intervention {
        record: InterventionRecord,
    },
    Final {
        answer: FinalAnswer,
        exchange: Exchange,
    },
    Error {
        message: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        iteration: Option<u32>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        exchange: Option<Exchange>,
    },
}

impl EventBody {
    pub fn kind(&self) -> &'static str {
        match self {
            EventBody::SessionStart { .. } => "session_start",
            EventBody::State { .. } => "state",
            EventBody::Action { .. } => "action",
            EventBody::Intervention { .. } => "intervention",
            EventBody::Final { .. } => "final",
            EventBody::Error { .. } => "error",
        }
    }
}

pub trait EventSink: Send {
    fn emit(&mut self, event: &Event) -> io::Result<()>;
}

/// Appends each event as one JSON line, flushing after every write.
pub struct JsonlSink {
    file: File,
}

impl JsonlSink {
    pub fn create(path: impl AsRef<Path>) -> io::Result<Self> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        Ok(Self {
            file: File::create(path)?,
        })
    }
}

impl EventSink for JsonlSink {
    fn emit(&mut self, event: &Event) -> io::Result<()> {
        let mut line = serde_json::to_string(event).map_err(io::Error::other)?;
        line.push('\n');
        self.file.write_all(line.as_bytes())?;
        self.file.flush()
    }
}

/// Collects events in memory behind a shared handle.
#[derive(Clone, Default)]
pub struct MemorySink(pub Arc<Mutex<Vec<Event>>>);

impl MemorySink {
    pub fn events(&self) -> Vec<Event> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }
}

impl EventSink for MemorySink {
    fn emit(&mut self, event: &Event) -> io::Result<()> {
        self.0.lock().unwrap_or_else(|e| e.into_inner()).push(event.clone());
        Ok(())
    }
}

impl<F: FnMut(&Event) -> io::Result<()> + Send> EventSink for F {
    fn emit(&mut self, event: &Event) -> io::Result<()> {
        self(event)
    }
}

#[derive(Debug, Error)]
pub enum TrajectoryError {
    #[error("trajectory io: {0}")]
    Io(#[from] io::Error),
    #[error("line {line}: {message}")]
    Line { line: usize, message: String },
    #[error("no session header")]
    NoHeader,
    #[error("event {seq}: {message}")]
    Inconsistent { seq: u64, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub state: AnalyticState,
    pub findings: Vec<RelevanceScore>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub action: Option<ActionRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalRecord {
    pub answer: FinalAnswer,
    pub exchange: Exchange,
    pub at: DateTime<Utc>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    pub message: String,
    pub iteration: Option<u32>,
    pub exchange: Option<Exchange>,
    pub at: DateTime<Utc>,
}

/// The structured view of a session's event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub session_id: String,
    pub slide_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub config: SessionConfig,
    pub started_at: DateTime<Utc>,
    pub iterations: Vec<IterationRecord>,
    pub interventions: Vec<InterventionRecord>,
    pub final_answer: Option<FinalRecord>,
    pub error: Option<ErrorRecord>,
    pub last_seq: u64,
}

impl Trajectory {
    pub fn from_events(events: &[Event]) -> Result<Self, TrajectoryError> {
        let (first, rest) = events.split_first().ok_or(TrajectoryError::NoHeader)?;
        let EventBody::SessionStart {
            session_id,
            slide_id,
            question,
            options,
            config,
        } = &first.body
        else {
            return Err(TrajectoryError::NoHeader);
        };
        let mut traj = Trajectory {
            session_id: session_id.clone(),
            slide_id: slide_id.clone(),
            question: question.clone(),
            options: options.clone(),
            config: config.clone(),
            started_at: first.at,
            iterations: Vec::new(),
            interventions: Vec::new(),
            final_answer: None,
            error: None,
            last_seq: first.seq,
        };
        for ev in rest {
            let bad = |message: String| TrajectoryError::Inconsistent { seq: ev.seq, message };
            if ev.seq != traj.last_seq + 1 {
                return Err(bad(format!("expected seq {}", traj.last_seq + 1)));
            }
            traj.last_seq = ev.seq;
            match &ev.body {
                EventBody::SessionStart { .. } => return Err(bad("second session header".into())),
                EventBody::State {
                    iteration,
                    state,
                    findings,
                } => {
                    let idx = *iteration as usize;
                    if idx == 0 || idx > traj.iterations.len() + 1 {
                        return Err(bad(format!("state for iteration {iteration} out of order")));
                    }
                    let record = IterationRecord {
                        state: state.clone(),
                        findings: findings.clone(),
                        action: None,
                    };
                    if idx == traj.iterations.len() + 1 {
                        traj.iterations.push(record);
                    } else {
                        let slot = &mut traj.iterations[idx - 1];
                        slot.state = record.state;
                        slot.findings = record.findings;
                    }
                }
                EventBody::Action { record } => {
                    let slot = traj
                        .iterations
                        .get_mut((record.iteration as usize).wrapping_sub(1))
                        .ok_or_else(|| bad(format!("action for unknown iteration {}", record.iteration)))?;
                    slot.action = Some(record.clone());
                }
                EventBody::Intervention { record } => traj.interventions.push(record.clone()),
                EventBody::Final { answer, exchange } => {
                    traj.final_answer = Some(FinalRecord {
                        answer: answer.clone(),
                        exchange: exchange.clone(),
                        at: ev.at,
                    })
                }
                EventBody::Error {
                    message,
                    iteration,
                    exchange,
                } => {
                    traj.error = Some(ErrorRecord {
                        message: message.clone(),
                        iteration: *iteration,
                        exchange: exchange.clone(),
                        at: ev.at,
                    })
                }
            }
        }
        Ok(traj)
    }

    pub fn actions(&self) -> impl Iterator<Item = &ActionRecord> {
        self.iterations.iter().filter_map(|i| i.action.as_ref())
    }

    pub fn states(&self) -> Vec<AnalyticState> {
        self.iterations.iter().map(|i| i.state.clone()).collect()
    }
}

/// Reads every event of a log; errors name the offending 1-based line.
pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<Event>, TrajectoryError> {
    let reader = BufReader::new(File::open(path)?);
    let mut events = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ev = serde_json::from_str(&line).map_err(|e| TrajectoryError::Line {
            line: i + 1,
            message: e.to_string(),
        })?;
        events.push(ev);
    }
    Ok(events)
}

pub fn load_trajectory(path: impl AsRef<Path>) -> Result<Trajectory, TrajectoryError> {
    Trajectory::from_events(&read_events(path)?)
}
