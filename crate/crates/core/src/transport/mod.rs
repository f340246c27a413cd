//! Node connections: one reusable session per node, rate-limited
//! establishment, reconnection with backoff, and three implementations
//! (local processes, an external SSH client, and a scripted mock).

mod limiter;
pub mod local;
pub mod mock;
pub mod ssh;

pub use limiter::{RateLimitParseError, RateLimiter, RateLimiterConfig};

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use tokio_util::sync::CancellationToken;

use crate::model::{EnvVar, TargetDef, TargetKind, TaskOutcome, TaskResult};
use crate::scheduler::Clock;
use crate::telemetry::{EventKind, ExecutionEvent, SharedSink};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("connecting to {node} failed: {reason}")]
    ConnectFailed { node: String, reason: String },
    #[error("node {0} is unreachable")]
    Unreachable(String),
    #[error("{0}")]
    AuthUnsupported(String),
    #[error("session to {0} is not connected")]
    SessionClosed(String),
    #[error("connection to {0} was lost")]
    ConnectionLost(String),
    #[error("remote file '{0}' does not exist")]
    RemoteFileMissing(String),
    #[error("local file {} does not exist", .0.display())]
    LocalFileMissing(PathBuf),
    #[error("could not reconnect to {node} after {attempts} attempts")]
    RetriesExhausted { node: String, attempts: u32 },
    #[error("remote path '{0}' escapes the artifact directory")]
    PathEscape(String),
    #[error("no transport for {kind} target '{node}'")]
    Unsupported { node: String, kind: TargetKind },
    #[error("I/O error: {0}")]
    Io(String),
}

impl From<std::io::Error> for TransportError {
    fn from(e: std::io::Error) -> Self {
        TransportError::Io(e.to_string())
    }
}

impl TransportError {
    /// Task outcome recorded when this error ends a task.
    pub fn task_outcome(&self) -> TaskOutcome {
        match self {
            TransportError::ConnectionLost(_)
            | TransportError::SessionClosed(_)
            | TransportError::RetriesExhausted { .. }
            | TransportError::ConnectFailed { .. }
            | TransportError::Unreachable(_) => TaskOutcome::ConnectionLost,
            _ => TaskOutcome::Failed,
        }
    }
}

/// How a remote command ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecEnd {
    Exited(i32),
    TimedOut,
    Aborted,
    ConnectionLost,
}

/// A command to run on a node.
pub struct ExecRequest<'a> {
    pub command: &'a str,
    pub env: &'a [EnvVar],
    /// Experiment-clock instant after which the command is terminated.
    pub deadline: Option<Duration>,
    pub cancel: &'a CancellationToken,
    pub clock: &'a Clock,
    /// Where to capture output; `None` discards it.
    pub stdout: Option<&'a Path>,
    pub stderr: Option<&'a Path>,
}

/// An established link to one node.
#[async_trait]
pub trait Connection: Send + Sync {
    async fn exec(&self, req: &ExecRequest<'_>) -> Result<ExecEnd, TransportError>;
    /// Copies `remote` to the controller-side file `dest`.
    async fn fetch(&self, remote: &str, dest: &Path) -> Result<(), TransportError>;
    /// Copies the controller-side file `local` to `remote`.
    async fn push(&self, local: &Path, remote: &str) -> Result<(), TransportError>;
    fn is_alive(&self) -> bool;
    async fn close(&self);
}

/// Establishes connections to leaf targets.
#[async_trait]
pub trait Transport: Send + Sync {
    async fn connect(&self, target: &TargetDef, clock: &Clock) -> Result<Arc<dyn Connection>, TransportError>;
}

/// Dispatches on target kind to the local or SSH transport.
pub struct DefaultTransports {
    pub local: local::LocalTransport,
    pub ssh: ssh::SshTransport,
}

#[async_trait]
impl Transport for DefaultTransports {
    async fn connect(&self, target: &TargetDef, clock: &Clock) -> Result<Arc<dyn Connection>, TransportError> {
        match target.kind {
            TargetKind::Local => self.local.connect(target, clock).await,
            TargetKind::Ssh => self.ssh.connect(target, clock).await,
            kind => Err(TransportError::Unsupported {
                node: target.name.clone(),
                kind,
            }),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionState {
    /// No connection has been established yet.
    Pending,
    Connected,
    Lost,
    Closed,
}

impl fmt::Display for SessionState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

struct SessionInner {
    state: SessionState,
    conn: Option<Arc<dyn Connection>>,
}

/// The single control session for one node.
pub struct Session {
    target: TargetDef,
    inner: Mutex<SessionInner>,
    connect_count: AtomicU32,
    establish: tokio::sync::Mutex<()>,
    sink: SharedSink,
}

impl Session {
    fn new(target: TargetDef, sink: SharedSink) -> Self {
        Self {
            target,
            inner: Mutex::new(SessionInner {
                state: SessionState::Pending,
                conn: None,
            }),
            connect_count: AtomicU32::new(0),
            establish: tokio::sync::Mutex::new(()),
            sink,
        }
    }

    pub fn node(&self) -> &str {
        &self.target.name
    }

    pub fn state(&self) -> SessionState {
        self.inner.lock().unwrap().state
    }

    /// Establishment attempts made for this node so far.
    pub fn connect_count(&self) -> u32 {
        self.connect_count.load(Ordering::SeqCst)
    }

    fn live_connection(&self) -> Result<Arc<dyn Connection>, TransportError> {
        let inner = self.inner.lock().unwrap();
        match (&inner.state, &inner.conn) {
            (SessionState::Connected, Some(c)) => Ok(c.clone()),
            _ => Err(TransportError::SessionClosed(self.target.name.clone())),
        }
    }

    /// Moves a connected session to `Lost` and logs it.
    fn mark_lost(&self, detail: &str) {
        let mut inner = self.inner.lock().unwrap();
        if inner.state == SessionState::Connected {
            inner.state = SessionState::Lost;
            inner.conn = None;
            drop(inner);
            let _ = self.sink.record(
                ExecutionEvent::new(EventKind::ConnectLost)
                    .node(self.node())
                    .detail(detail),
            );
        }
    }

    fn check_alive(&self) -> Result<Arc<dyn Connection>, TransportError> {
        let conn = self.live_connection()?;
        if conn.is_alive() {
            Ok(conn)
        } else {
            self.mark_lost("connection found dead");
            Err(TransportError::SessionClosed(self.target.name.clone()))
        }
    }

    fn lost<T>(&self, result: Result<T, TransportError>) -> Result<T, TransportError> {
        if let Err(TransportError::ConnectionLost(_)) = &result {
            self.mark_lost("connection dropped during transfer");
        }
        result
    }

    /// Runs a command. Fails with `SessionClosed` unless the session is connected.
    pub async fn exec(&self, req: &ExecRequest<'_>) -> Result<TaskResult, TransportError> {
        let conn = self.check_alive()?;
        let started = req.clock.now();
        let end = conn.exec(req).await;
        let finished = req.clock.now();
        let (exit_code, outcome) = match end? {
            ExecEnd::Exited(0) => (0, TaskOutcome::Success),
            ExecEnd::Exited(n) => (n, TaskOutcome::Failed),
            ExecEnd::TimedOut => (-1, TaskOutcome::TimedOut),
            ExecEnd::Aborted => (-1, TaskOutcome::Aborted),
            ExecEnd::ConnectionLost => {
                self.mark_lost("connection dropped during command");
                (-1, TaskOutcome::ConnectionLost)
            }
        };
        Ok(TaskResult {
            node: self.target.name.clone(),
            exit_code,
            started,
            finished,
            stdout_ref: req.stdout.map(Path::to_path_buf),
            stderr_ref: req.stderr.map(Path::to_path_buf),
            outcome,
        })
    }

    /// Copies `remote` into `local_dir/<node>/<basename>` and returns that path.
    pub async fn fetch(&self, remote: &str, local_dir: &Path) -> Result<PathBuf, TransportError> {
        let conn = self.check_alive()?;
        let name = crate::telemetry::safe_basename(remote)
            .map_err(|_| TransportError::PathEscape(remote.to_string()))?;
        let dir = local_dir.join(crate::telemetry::sanitize_component(self.node()));
        std::fs::create_dir_all(&dir)?;
        let dest = dir.join(name);
        self.lost(conn.fetch(remote, &dest).await)?;
        Ok(dest)
    }

    pub async fn push(&self, local: &Path, remote: &str) -> Result<(), TransportError> {
        if !local.is_file() {
            return Err(TransportError::LocalFileMissing(local.to_path_buf()));
        }
        let conn = self.check_alive()?;
        self.lost(conn.push(local, remote).await)
    }

    async fn close(&self) {
        let conn = {
            let mut inner = self.inner.lock().unwrap();
            inner.state = SessionState::Closed;
            inner.conn.take()
        };
        if let Some(c) = conn {
            c.close().await;
        }
    }
}

/// Exponential reconnection schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ReconnectPolicy {
    /// Total attempts per reconnection, the first one immediate.
    pub budget: u32,
    pub base: Duration,
    pub factor: u32,
    pub cap: Duration,
}

impl Default for ReconnectPolicy {
    fn default() -> Self {
        Self {
            budget: 5,
            base: Duration::from_secs(1),
            factor: 2,
            cap: Duration::from_secs(60),
        }
    }
}

impl ReconnectPolicy {
    /// Wait before attempt `n` (0-based) of a reconnection.
    pub fn delay_before(&self, n: u32) -> Duration {
        if n == 0 {
            return Duration::ZERO;
        }
        let mut d = self.base;
        for _ in 1..n {
            d = d.saturating_mul(self.factor);
            if d >= self.cap {
                return self.cap;
            }
        }
        d.min(self.cap)
    }
}

/// All sessions of a run, keyed by node name.
pub struct SessionPool {
    transport: Arc<dyn Transport>,
    limiter: Arc<RateLimiter>,
    clock: Clock,
    sink: SharedSink,
    policy: ReconnectPolicy,
    sessions: Mutex<BTreeMap<String, Arc<Session>>>,
}

impl SessionPool {
    pub fn new(
        transport: Arc<dyn Transport>,
        limiter: Arc<RateLimiter>,
        clock: Clock,
        sink: SharedSink,
        policy: ReconnectPolicy,
    ) -> Self {
        Self {
            transport,
            limiter,
            clock,
            sink,
            policy,
            sessions: Mutex::new(BTreeMap::new()),
        }
    }

    pub fn session(&self, node: &str) -> Option<Arc<Session>> {
        self.sessions.lock().unwrap().get(node).cloned()
    }

    pub fn sessions(&self) -> Vec<Arc<Session>> {
        self.sessions.lock().unwrap().values().cloned().collect()
    }

    /// Returns the node's session, connected. Reuses a live session, performs
    /// one establishment attempt for a new one and reconnects a lost one.
    pub async fn acquire(&self, target: &TargetDef) -> Result<Arc<Session>, TransportError> {
        let session = self
            .sessions
            .lock()
            .unwrap()
            .entry(target.name.clone())
            .or_insert_with(|| Arc::new(Session::new(target.clone(), self.sink.clone())))
            .clone();
        self.ready(&session).await?;
        Ok(session)
    }

    async fn ready(&self, session: &Session) -> Result<(), TransportError> {
        let _guard = session.establish.lock().await;
        match session.state() {
            SessionState::Connected => {
                if session.check_alive().is_ok() {
                    return Ok(());
                }
                self.reconnect_locked(session).await
            }
            SessionState::Lost => self.reconnect_locked(session).await,
            SessionState::Pending => self.attempt(session, "").await,
            SessionState::Closed => Err(TransportError::SessionClosed(session.node().to_string())),
        }
    }

    async fn attempt(&self, session: &Session, detail: &str) -> Result<(), TransportError> {
        self.limiter.acquire(&self.clock).await;
        let n = session.connect_count.fetch_add(1, Ordering::SeqCst) + 1;
        let detail = if detail.is_empty() {
            format!("attempt {n}")
        } else {
            format!("attempt {n} ({detail})")
        };
        self.sink.record(
            ExecutionEvent::new(EventKind::ConnectAttempt)
                .node(session.node())
                .detail(detail),
        )
        .map_err(|e| TransportError::Io(e.to_string()))?;
        match self.transport.connect(&session.target, &self.clock).await {
            Ok(conn) => {
                {
                    let mut inner = session.inner.lock().unwrap();
                    inner.state = SessionState::Connected;
                    inner.conn = Some(conn);
                }
                let _ = self
                    .sink
                    .record(ExecutionEvent::new(EventKind::ConnectSuccess).node(session.node()));
                Ok(())
            }
            Err(e) => {
                let _ = self.sink.record(
                    ExecutionEvent::new(EventKind::Warning)
                        .node(session.node())
                        .detail(e.to_string()),
                );
                Err(e)
            }
        }
    }

    async fn reconnect_locked(&self, session: &Session) -> Result<(), TransportError> {
        for n in 0..self.policy.budget {
            let delay = self.policy.delay_before(n);
            if !delay.is_zero() {
                self.clock.sleep(delay).await;
            }
            match self.attempt(session, "reconnect").await {
                Ok(()) => return Ok(()),
                Err(e @ TransportError::AuthUnsupported(_)) => return Err(e),
                Err(_) => {}
            }
        }
        Err(TransportError::RetriesExhausted {
            node: session.node().to_string(),
            attempts: self.policy.budget,
        })
    }

    /// Reconnects a lost session.
    pub async fn reconnect(&self, session: &Session) -> Result<(), TransportError> {
        let _guard = session.establish.lock().await;
        self.reconnect_locked(session).await
    }

    pub async fn close_all(&self) {
        for s in self.sessions() {
            s.close().await;
        }
    }
}
