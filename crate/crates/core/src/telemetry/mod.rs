//! Append-only structured event log and run-directory layout.
//!
//! Every event is stamped with the experiment clock at the moment it is
//! appended, under the same lock that serializes the append, so the log is
//! timestamp-monotone even under concurrent writers.

mod report;

pub use report::render_report;

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, Write};
use std::path::{Component, Path, PathBuf};
use std::sync::{Arc, Mutex};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::model::{ExperimentReport, NodeOutcome, TaskOutcome};
use crate::scheduler::Clock;

pub const EVENTS_FILE: &str = "events.jsonl";
pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TEXT: &str = "report.txt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EventKind {
    ExperimentStart,
    StepStart,
    StepEnd,
    TaskStart,
    TaskEnd,
    BarrierRelease,
    TeardownStart,
    TeardownEnd,
    ConnectAttempt,
    ConnectSuccess,
    ConnectLost,
    Warning,
    Panic,
    ExperimentEnd,
}

/// One line of the event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionEvent {
    /// Milliseconds since the start of the experiment.
    pub t_ms: u64,
    pub kind: EventKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teardown: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub tasklist: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task_path: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub outcome: Option<TaskOutcome>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
    /// Per-node results, carried by `StepEnd` and `TeardownEnd`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub nodes: Option<BTreeMap<String, NodeOutcome>>,
    /// Fetched file, relative to the run directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fetched: Option<String>,
    /// Output captures, relative to the run directory.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub captures: Vec<String>,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub detail: String,
}

impl ExecutionEvent {
    pub fn new(kind: EventKind) -> Self {
        Self {
            t_ms: 0,
            kind,
            node: None,
            step: None,
            teardown: None,
            tasklist: None,
            task_path: None,
            outcome: None,
            exit_code: None,
            nodes: None,
            fetched: None,
            captures: Vec::new(),
            detail: String::new(),
        }
    }

    pub fn node(mut self, node: impl Into<String>) -> Self {
        self.node = Some(node.into());
        self
    }

    pub fn step(mut self, step: Option<usize>) -> Self {
        self.step = step;
        self
    }

    pub fn teardown(mut self, teardown: Option<usize>) -> Self {
        self.teardown = teardown;
        self
    }

    pub fn tasklist(mut self, tasklist: impl Into<String>) -> Self {
        self.tasklist = Some(tasklist.into());
        self
    }

    pub fn task_path(mut self, path: Vec<usize>) -> Self {
        self.task_path = Some(path);
        self
    }

    pub fn detail(mut self, detail: impl Into<String>) -> Self {
        self.detail = detail.into();
        self
    }

    pub fn is_start(&self) -> bool {
        matches!(
            self.kind,
            EventKind::ExperimentStart
                | EventKind::StepStart
                | EventKind::TaskStart
                | EventKind::TeardownStart
        )
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SinkError {
    #[error("event log I/O error: {0}")]
    Io(#[from] io::Error),
    #[error("run directory {0} already exists")]
    RunDirExists(PathBuf),
    #[error("remote-supplied path '{0}' escapes the run directory")]
    PathEscape(String),
}

struct SinkState {
    events: Vec<ExecutionEvent>,
    file: Option<File>,
    failed: bool,
}

/// Thread-safe append-only event log, optionally mirrored to `events.jsonl`.
pub struct EventSink {
    clock: Clock,
    state: Mutex<SinkState>,
}

impl EventSink {
    pub fn in_memory(clock: Clock) -> Self {
        Self {
            clock,
            state: Mutex::new(SinkState {
                events: Vec::new(),
                file: None,
                failed: false,
            }),
        }
    }

    pub fn to_file(clock: Clock, path: &Path) -> Result<Self, SinkError> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        let sink = Self::in_memory(clock);
        sink.state.lock().unwrap().file = Some(file);
        Ok(sink)
    }

    pub fn clock(&self) -> &Clock {
        &self.clock
    }

    /// Stamps and appends `event`.
    pub fn record(&self, event: ExecutionEvent) -> Result<(), SinkError> {
        self.record_if(event, || true).map(|_| ())
    }

    /// Appends `event` only if `admit` returns true; `admit` runs under the log
    /// lock, so its decision is ordered with respect to every other append.
    pub fn record_if(
        &self,
        mut event: ExecutionEvent,
        admit: impl FnOnce() -> bool,
    ) -> Result<bool, SinkError> {
        let mut state = self.state.lock().unwrap();
        if !admit() {
            return Ok(false);
        }
        event.t_ms = self.clock.now().as_millis() as u64;
        let result = match state.file.as_mut() {
            Some(file) => {
                let mut line = serde_json::to_vec(&event).map_err(io::Error::from)?;
                line.push(b'\n');
                file.write_all(&line)
            }
            None => Ok(()),
        };
        state.events.push(event);
        if let Err(e) = result {
            state.failed = true;
            return Err(e.into());
        }
        Ok(true)
    }

    /// Appends `event` and runs `then` while still holding the log lock.
    pub fn record_then(&self, event: ExecutionEvent, then: impl FnOnce()) -> Result<(), SinkError> {
        let mut then = Some(then);
        self.record_if(event, || {
            if let Some(f) = then.take() {
                f();
            }
            true
        })
        .map(|_| ())
    }

    pub fn has_failed(&self) -> bool {
        self.state.lock().unwrap().failed
    }

    pub fn events(&self) -> Vec<ExecutionEvent> {
        self.state.lock().unwrap().events.clone()
    }

    pub fn len(&self) -> usize {
        self.state.lock().unwrap().events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Replaces characters that cannot appear in a single path component.
pub fn sanitize_component(name: &str) -> String {
    let cleaned: String = name
        .chars()
        .map(|c| if c == '/' || c == '\\' || c == '\0' { '_' } else { c })
        .collect();
    match cleaned.as_str() {
        "" | "." | ".." => format!("_{cleaned}"),
        _ => cleaned,
    }
}

/// Final component of a remote-supplied path, rejecting anything that would
/// resolve outside the directory it is placed into.
pub fn safe_basename(remote: &str) -> Result<String, SinkError> {
    match Path::new(remote).components().next_back() {
        Some(Component::Normal(name)) => {
            let name = name.to_string_lossy().into_owned();
            if name.contains('\\') || name.contains('\0') {
                Err(SinkError::PathEscape(remote.to_string()))
            } else {
                Ok(name)
            }
        }
        _ => Err(SinkError::PathEscape(remote.to_string())),
    }
}

/// Directory holding everything a run produces.
#[derive(Debug, Clone)]
pub struct RunDir {
    root: PathBuf,
}

impl RunDir {
    /// Creates `<log_dir>/<timestamp>-<name>`; refuses to reuse an existing one.
    pub fn create(log_dir: &Path, experiment_name: &str, started: DateTime<Utc>) -> Result<Self, SinkError> {
        let dir_name = format!(
            "{}-{}",
            started.format("%Y%m%dT%H%M%S%.3fZ"),
            sanitize_component(experiment_name)
        );
        Self::create_at(&log_dir.join(dir_name))
    }

    pub fn create_at(root: &Path) -> Result<Self, SinkError> {
        if let Some(parent) = root.parent() {
            fs::create_dir_all(parent)?;
        }
        match fs::create_dir(root) {
            Ok(()) => Ok(Self {
                root: root.to_path_buf(),
            }),
            Err(e) if e.kind() == io::ErrorKind::AlreadyExists => {
                Err(SinkError::RunDirExists(root.to_path_buf()))
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn path(&self) -> &Path {
        &self.root
    }

    pub fn events_path(&self) -> PathBuf {
        self.root.join(EVENTS_FILE)
    }

    /// Per-node directory, created on demand.
    pub fn node_dir(&self, node: &str) -> Result<PathBuf, SinkError> {
        let dir = self.root.join(sanitize_component(node));
        fs::create_dir_all(&dir)?;
        Ok(dir)
    }

    /// Path relative to the run directory, for the artifact index.
    pub fn relative(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .to_string_lossy()
            .into_owned()
    }

    pub fn write_report(&self, report: &ExperimentReport, summary: &str) -> Result<(), SinkError> {
        let json = serde_json::to_vec_pretty(report).map_err(io::Error::from)?;
        fs::write(self.root.join(REPORT_JSON), json)?;
        fs::write(self.root.join(REPORT_TEXT), summary)?;
        Ok(())
    }
}

/// Shared handle used by executors to record events.
pub type SharedSink = Arc<EventSink>;
