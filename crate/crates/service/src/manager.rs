//! Live sessions, their event logs and the on-disk session directory.
//!
//! Every session writes `{session_dir}/{id}.jsonl`; `index.json` lists all
//! sessions ever created so finished ones survive a restart read-only.

use std::collections::BTreeMap;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use tokio::sync::watch;

use slide_agent_core::orchestrator::{
    read_events, Checkpoint, Event, EventBody, Intervention, InterventionError, InterventionRecord, JsonlSink,
    Session, SessionConfig, SessionError, SessionOptions, SessionStatus, Trajectory,
};
use slide_agent_core::runtime::{Runtime, RuntimeError};

pub const INDEX_FILE: &str = "index.json";

#[derive(Debug, thiserror::Error)]
pub enum ManagerError {
    #[error("session {0:?} not found")]
    NotFound(String),
    #[error(transparent)]
    Slide(#[from] RuntimeError),
    #[error("too many active sessions (limit {0})")]
    Busy(usize),
    #[error("session is {0}; it must be paused")]
    Conflict(String),
    #[error(transparent)]
    Intervention(InterventionError),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("session directory: {0}")]
    Io(#[from] io::Error),
}

/// Public summary of a session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub id: String,
    pub status: SessionStatus,
    pub current_iteration: u32,
    pub created_at: DateTime<Utc>,
    pub slide_id: String,
    pub question: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<Checkpoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct IndexEntry {
    id: String,
    slide_id: String,
    question: String,
    created_at: DateTime<Utc>,
    file: String,
}

/// Events seen so far plus a counter that wakes stream readers.
pub struct EventLog {
    events: Mutex<Vec<Event>>,
    len: watch::Sender<usize>,
}

impl EventLog {
    fn new(initial: Vec<Event>) -> Arc<Self> {
        let (len, _) = watch::channel(initial.len());
        Arc::new(Self {
            events: Mutex::new(initial),
            len,
        })
    }

    fn push(&self, e: &Event) {
        let mut events = self.events.lock().unwrap_or_else(|e| e.into_inner());
        events.push(e.clone());
        self.len.send_replace(events.len());
    }

    pub fn from_seq(&self, seq: u64) -> Vec<Event> {
        let events = self.events.lock().unwrap_or_else(|e| e.into_inner());
        events.iter().filter(|e| e.seq >= seq).cloned().collect()
    }

    pub fn snapshot(&self) -> Vec<Event> {
        self.from_seq(0)
    }

    pub fn subscribe(&self) -> watch::Receiver<usize> {
        self.len.subscribe()
    }
}

pub fn is_terminal_event(e: &Event) -> bool {
    matches!(e.body, EventBody::Final { .. } | EventBody::Error { .. })
}

struct Snapshot {
    status: SessionStatus,
    iteration: u32,
    checkpoint: Option<Checkpoint>,
}

impl Snapshot {
    fn of(s: &Session) -> Self {
        Self {
            status: s.status(),
            iteration: s.iteration(),
            checkpoint: s.checkpoint(),
        }
    }
}

pub struct ManagedSession {
    pub id: String,
    pub slide_id: String,
    pub question: String,
    pub created_at: DateTime<Utc>,
    pub path: PathBuf,
    pub log: Arc<EventLog>,
    /// `None` for sessions restored from disk.
    session: Option<Arc<Mutex<Session>>>,
    snapshot: Mutex<Snapshot>,
}

impl ManagedSession {
    pub fn handle(&self) -> SessionHandle {
        let snap = self.snapshot.lock().unwrap_or_else(|e| e.into_inner());
        SessionHandle {
            id: self.id.clone(),
            status: snap.status,
            current_iteration: snap.iteration,
            created_at: self.created_at,
            slide_id: self.slide_id.clone(),
            question: self.question.clone(),
            checkpoint: snap.checkpoint,
        }
    }

    pub fn status(&self) -> SessionStatus {
        self.snapshot.lock().unwrap_or_else(|e| e.into_inner()).status
    }

    pub fn trajectory(&self) -> Option<Trajectory> {
        Trajectory::from_events(&self.log.snapshot()).ok()
    }

    fn refresh(&self, s: &Session) {
        *self.snapshot.lock().unwrap_or_else(|e| e.into_inner()) = Snapshot::of(s);
    }

    /// Marks the session running if it is paused; the check and the update
    /// happen under one lock so only one caller wins.
    fn claim(&self) -> Result<Arc<Mutex<Session>>, ManagerError> {
        let mut snap = self.snapshot.lock().unwrap_or_else(|e| e.into_inner());
        let session = match &self.session {
            Some(s) if matches!(snap.status, SessionStatus::Paused | SessionStatus::AwaitingIntervention) => s.clone(),
            _ => return Err(ManagerError::Conflict(snap.status.as_str().to_string())),
        };
        snap.status = SessionStatus::Running;
        snap.checkpoint = None;
        Ok(session)
    }

    /// Runs to the next checkpoint or the end. Blocking.
    pub fn resume(&self) -> Result<SessionHandle, ManagerError> {
        let session = self.claim()?;
        let mut s = session.lock().unwrap_or_else(|e| e.into_inner());
        let result = s.resume();
        self.refresh(&s);
        drop(s);
        if let Err(e) = result {
            tracing::warn!(session = %self.id, error = %e, "session failed");
        }
        Ok(self.handle())
    }

    /// Steps a non-interactive session to completion, releasing the lock
    /// between steps so status reads stay responsive. Blocking.
    pub fn drive(&self) {
        let Some(session) = &self.session else { return };
        loop {
            let mut s = session.lock().unwrap_or_else(|e| e.into_inner());
            if s.status().is_terminal() {
                self.refresh(&s);
                return;
            }
            let r = s.step();
            self.refresh(&s);
            if let Err(e) = r {
                tracing::warn!(session = %self.id, error = %e, "session failed");
                return;
            }
        }
    }

    pub fn intervene(&self, intervention: Intervention, author: &str) -> Result<InterventionRecord, ManagerError> {
        // Checked under the snapshot lock first so a running step is never
        // waited on.
        let session = {
            let snap = self.snapshot.lock().unwrap_or_else(|e| e.into_inner());
            match &self.session {
                Some(s) if matches!(snap.status, SessionStatus::Paused | SessionStatus::AwaitingIntervention) => {
                    s.clone()
                }
                _ => return Err(ManagerError::Conflict(snap.status.as_str().to_string())),
            }
        };
        let mut s = session.lock().unwrap_or_else(|e| e.into_inner());
        let r = s.apply_intervention(intervention, author);
        self.refresh(&s);
        match r {
            Ok(rec) => Ok(rec),
            Err(InterventionError::NotPaused(status)) => Err(ManagerError::Conflict(status)),
            Err(e) => Err(ManagerError::Intervention(e)),
        }
    }
}

pub struct CreateRequest {
    pub slide_id: String,
    pub question: String,
    pub options: Vec<String>,
    pub config: SessionConfig,
}

pub struct SessionManager {
    pub runtime: Arc<Runtime>,
    dir: PathBuf,
    max_active: usize,
    sessions: Mutex<BTreeMap<String, Arc<ManagedSession>>>,
    index_lock: Mutex<()>,
}

impl SessionManager {
    /// Opens `dir`, restoring every session listed in its index read-only.
    pub fn open(runtime: Arc<Runtime>, dir: impl Into<PathBuf>, max_active: usize) -> Result<Self, ManagerError> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir)?;
        let mut sessions = BTreeMap::new();
        for entry in read_index(&dir)? {
            let path = dir.join(&entry.file);
            let events = match read_events(&path) {
                Ok(ev) => ev,
                Err(e) => {
                    tracing::warn!(session = %entry.id, error = %e, "skipping unreadable session log");
                    continue;
                }
            };
            let status = match Trajectory::from_events(&events) {
                Ok(t) if t.final_answer.is_some() => SessionStatus::Done,
                _ => SessionStatus::Failed,
            };
            let iteration = events
                .iter()
                .filter_map(|e| match &e.body {
                    EventBody::State { iteration, .. } => Some(*iteration),
                    _ => None,
                })
                .max()
                .unwrap_or(0);
            sessions.insert(
                entry.id.clone(),
                Arc::new(ManagedSession {
                    id: entry.id,
                    slide_id: entry.slide_id,
                    question: entry.question,
                    created_at: entry.created_at,
                    path,
                    log: EventLog::new(events),
                    session: None,
                    snapshot: Mutex::new(Snapshot {
                        status,
                        iteration,
                        checkpoint: None,
                    }),
                }),
            );
        }
        Ok(Self {
            runtime,
            dir,
            max_active: max_active.max(1),
            sessions: Mutex::new(sessions),
            index_lock: Mutex::new(()),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn get(&self, id: &str) -> Result<Arc<ManagedSession>, ManagerError> {
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .get(id)
            .cloned()
            .ok_or_else(|| ManagerError::NotFound(id.to_string()))
    }

    pub fn list(&self) -> Vec<SessionHandle> {
        let sessions = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        let mut out: Vec<_> = sessions.values().map(|s| s.handle()).collect();
        out.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.id.cmp(&b.id)));
        out
    }

    fn active(&self) -> usize {
        let sessions = self.sessions.lock().unwrap_or_else(|e| e.into_inner());
        sessions.values().filter(|s| !s.status().is_terminal()).count()
    }

    /// Builds the session (embedding the slide if needed). Blocking.
    /// Non-interactive sessions still need [`ManagedSession::drive`].
    pub fn create(&self, req: CreateRequest) -> Result<Arc<ManagedSession>, ManagerError> {
        if self.active() >= self.max_active {
            return Err(ManagerError::Busy(self.max_active));
        }
        let (bundle, index) = self.runtime.slide_at(&req.slide_id, req.config.initial_magnification)?;
        let id = uuid::Uuid::new_v4().to_string();
        let file = format!("{id}.jsonl");
        let path = self.dir.join(&file);
        let log = EventLog::new(Vec::new());
        let feed = log.clone();
        let opts = SessionOptions {
            session_id: Some(id.clone()),
            sinks: vec![
                Box::new(JsonlSink::create(&path)?),
                Box::new(move |e: &Event| {
                    feed.push(e);
                    Ok(())
                }),
            ],
            decoding: self.runtime.config.decoding.clone(),
            ..SessionOptions::default()
        };
        let session = Session::new(
            bundle,
            index,
            self.runtime.backends.clone(),
            req.question.clone(),
            req.options,
            req.config,
            opts,
        )?;
        let created_at = session.events()[0].at;
        let managed = Arc::new(ManagedSession {
            id: id.clone(),
            slide_id: req.slide_id.clone(),
            question: req.question.clone(),
            created_at,
            path,
            log,
            snapshot: Mutex::new(Snapshot::of(&session)),
            session: Some(Arc::new(Mutex::new(session))),
        });
        self.sessions
            .lock()
            .unwrap_or_else(|e| e.into_inner())
            .insert(id.clone(), managed.clone());
        self.append_index(IndexEntry {
            id,
            slide_id: req.slide_id,
            question: req.question,
            created_at,
            file,
        })?;
        Ok(managed)
    }

    fn append_index(&self, entry: IndexEntry) -> io::Result<()> {
        let _guard = self.index_lock.lock().unwrap_or_else(|e| e.into_inner());
        let mut entries = read_index(&self.dir)?;
        entries.push(entry);
        let tmp = self.dir.join(format!(".{INDEX_FILE}.tmp"));
        std::fs::write(&tmp, serde_json::to_vec_pretty(&entries).map_err(io::Error::other)?)?;
        std::fs::rename(tmp, self.dir.join(INDEX_FILE))
    }
}

fn read_index(dir: &Path) -> io::Result<Vec<IndexEntry>> {
    match std::fs::read(dir.join(INDEX_FILE)) {
        Ok(bytes) => serde_json::from_slice(&bytes).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e)),
        Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(e),
    }
}
