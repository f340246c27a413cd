//! Executes the steps program: parallel steps, barriers, scheduled start and
//! stop, bounded loops, task trees with failure modes, and teardowns.

mod clock;

pub use clock::{real_runtime, virtual_runtime, Clock, ClockMode};

use std::collections::{BTreeMap, HashSet};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use chrono::{DateTime, Utc};
use futures::future::{join_all, BoxFuture};
use tokio_util::sync::CancellationToken;

use crate::model::{
    ErrorMode, Experiment, ExperimentReport, NodeOutcome, RegisterTeardown, Repeat, ResolvedNode, Step,
    StepsItem, Task, TaskOutcome, Tasklist, TimeSpec,
};
use crate::telemetry::{render_report, EventKind, EventSink, ExecutionEvent, RunDir, SharedSink, SinkError};
use crate::transport::{
    ExecRequest, RateLimiter, RateLimiterConfig, ReconnectPolicy, SessionPool, Transport, TransportError,
};

/// Everything a run needs besides the experiment, the clock and the log.
pub struct RunOptions {
    pub transport: Arc<dyn Transport>,
    pub limiter: Option<RateLimiterConfig>,
    pub reconnect: ReconnectPolicy,
    /// Receives output captures, fetched files and the report.
    pub run_dir: RunDir,
    /// Directory that relative `put` sources resolve against.
    pub put_base: PathBuf,
}

/// Runs `experiment` to completion, teardowns included.
///
/// Operational failures end up in the report; only a failing event log is an
/// error.
pub async fn run_experiment(
    experiment: Arc<Experiment>,
    clock: Clock,
    sink: SharedSink,
    options: RunOptions,
) -> Result<ExperimentReport, SinkError> {
    let pool = SessionPool::new(
        options.transport,
        Arc::new(RateLimiter::new(options.limiter)),
        clock.clone(),
        sink.clone(),
        options.reconnect,
    );
    let engine = Arc::new(Engine {
        exp: experiment,
        clock,
        sink: sink.clone(),
        pool,
        run_dir: options.run_dir,
        put_base: options.put_base,
        panic: CancellationToken::new(),
        teardowns: Mutex::new(Vec::new()),
        next_step: AtomicUsize::new(0),
    });

    sink.record(ExecutionEvent::new(EventKind::ExperimentStart))?;
    let program = engine.exp.steps.items.clone();
    engine.run_block(&program).await;
    engine.drain_teardowns().await;
    engine.pool.close_all().await;

    let (report, _) = render_report(&sink.events());
    sink.record(
        ExecutionEvent::new(EventKind::ExperimentEnd).detail(format!("{:?}", report.overall)),
    )?;
    if sink.has_failed() {
        return Err(SinkError::Io(std::io::Error::other("event log could not be written")));
    }
    let (report, summary) = render_report(&sink.events());
    engine.run_dir.write_report(&report, &summary)?;
    Ok(report)
}

/// Runs `experiment` on a fresh virtual clock whose wall time starts at
/// `wall_start`. With `log_to_file` the events also go to the run
/// directory's `events.jsonl`.
pub fn simulate(
    experiment: Arc<Experiment>,
    wall_start: DateTime<Utc>,
    log_to_file: bool,
    options: RunOptions,
) -> Result<(ExperimentReport, Vec<ExecutionEvent>), SinkError> {
    let runtime = virtual_runtime()?;
    runtime.block_on(async move {
        let clock = Clock::virtual_at(wall_start);
        let sink = Arc::new(if log_to_file {
            EventSink::to_file(clock.clone(), &options.run_dir.events_path())?
        } else {
            EventSink::in_memory(clock.clone())
        });
        let report = run_experiment(experiment, clock, sink.clone(), options).await?;
        Ok((report, sink.events()))
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DeadlineSource {
    /// The step's `stop` time: work is cut off without failing.
    Stop,
    /// A tasklist `timeout`: expiry is a failure.
    Timeout,
}

#[derive(Debug, Clone, Copy)]
struct Deadline {
    at: Duration,
    source: DeadlineSource,
}

fn earliest(a: Option<Deadline>, b: Option<Deadline>) -> Option<Deadline> {
    match (a, b) {
        (Some(x), Some(y)) => Some(if y.at < x.at { y } else { x }),
        (x, None) => x,
        (None, y) => y,
    }
}

/// How a task subtree ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Flow {
    Ok,
    Failed,
    /// Cut off by the step's stop time.
    Stopped,
    /// Cancelled by an abort elsewhere, or never admitted.
    Cancelled,
}

fn combine(flows: impl IntoIterator<Item = Flow>) -> Flow {
    let rank = |f: Flow| match f {
        Flow::Ok => 0,
        Flow::Cancelled => 1,
        Flow::Stopped => 2,
        Flow::Failed => 3,
    };
    flows.into_iter().max_by_key(|f| rank(*f)).unwrap_or(Flow::Ok)
}

#[derive(Debug, Clone, Copy)]
enum Scope {
    Step(usize),
    Teardown(usize),
}

impl Scope {
    fn label(self) -> String {
        match self {
            Scope::Step(n) => format!("s{n}"),
            Scope::Teardown(n) => format!("td{n}"),
        }
    }
}

/// One tasklist occurrence on one node.
struct NodeRun {
    scope: Scope,
    node: ResolvedNode,
    /// Parent of cleanup tokens: the panic token for steps, a private token
    /// for teardowns.
    cleanup_root: CancellationToken,
    step_token: CancellationToken,
    failed: AtomicBool,
    started: AtomicBool,
    capture_names: Mutex<HashSet<String>>,
}

/// One activation of a tasklist body.
struct Frame<'a> {
    tasklist: &'a Tasklist,
    token: CancellationToken,
    deadline: Option<Deadline>,
    /// False inside cleanups and teardowns, where every failure acts as
    /// abort-tasklist.
    escalate: bool,
}

struct LeafEnd {
    outcome: TaskOutcome,
    exit_code: Option<i32>,
    captures: Vec<String>,
    fetched: Option<String>,
    detail: String,
}

impl LeafEnd {
    fn of(outcome: TaskOutcome, detail: impl Into<String>) -> Self {
        Self {
            outcome,
            exit_code: None,
            captures: Vec::new(),
            fetched: None,
            detail: detail.into(),
        }
    }
}

fn child_path(path: &[usize], i: usize) -> Vec<usize> {
    let mut p = path.to_vec();
    p.push(i);
    p
}

fn describe(task: &Task) -> String {
    match task {
        Task::Run(c) => format!("run {c}"),
        Task::Get(p) => format!("get {p}"),
        Task::Put(p) => format!("put {p}"),
        Task::Seq(_) => "seq".into(),
        Task::Par(_) => "par".into(),
        Task::Call(t) => format!("call {t}"),
    }
}

struct Engine {
    exp: Arc<Experiment>,
    clock: Clock,
    sink: SharedSink,
    pool: SessionPool,
    run_dir: RunDir,
    put_base: PathBuf,
    panic: CancellationToken,
    teardowns: Mutex<Vec<RegisterTeardown>>,
    next_step: AtomicUsize,
}

impl Engine {
    fn offset(&self, t: TimeSpec) -> Duration {
        match t {
            TimeSpec::Relative(d) => d,
            TimeSpec::Absolute(w) => self.clock.offset_of(w),
        }
    }

    fn emit(&self, ev: ExecutionEvent) {
        if self.sink.record(ev).is_err() {
            self.panic.cancel();
        }
    }

    /// Appends `ev` unless the experiment has panicked.
    fn emit_unless_panicked(&self, ev: ExecutionEvent) -> bool {
        self.sink.record_if(ev, || !self.panic.is_cancelled()).unwrap_or(false)
    }

    fn scoped(&self, kind: EventKind, scope: Scope) -> ExecutionEvent {
        let ev = ExecutionEvent::new(kind);
        match scope {
            Scope::Step(n) => ev.step(Some(n)),
            Scope::Teardown(n) => ev.teardown(Some(n)),
        }
    }

    fn resolve(&self, scope: Scope, targets: &str) -> Vec<ResolvedNode> {
        match self.exp.resolve_target(targets) {
            Ok(mut nodes) => {
                nodes.sort_by(|a, b| a.name().cmp(b.name()));
                if nodes.is_empty() {
                    self.emit(
                        self.scoped(EventKind::Warning, scope)
                            .detail(format!("target '{targets}' has no reachable nodes; nothing to run")),
                    );
                }
                nodes
            }
            Err(e) => {
                self.emit(self.scoped(EventKind::Warning, scope).detail(e.to_string()));
                Vec::new()
            }
        }
    }

    fn run_block<'a>(self: &'a Arc<Self>, items: &'a [StepsItem]) -> BoxFuture<'a, ()> {
        Box::pin(async move {
            let mut launched = Vec::new();
            for item in items {
                if self.panic.is_cancelled() {
                    break;
                }
                match item {
                    StepsItem::Step(step) => {
                        let idx = self.next_step.fetch_add(1, Ordering::SeqCst);
                        let engine = Arc::clone(self);
                        let step = step.clone();
                        launched.push(tokio::spawn(engine.run_step(idx, step)));
                    }
                    StepsItem::Synchronize => {
                        join_all(launched.drain(..)).await;
                        self.emit_unless_panicked(ExecutionEvent::new(EventKind::BarrierRelease));
                    }
                    StepsItem::RegisterTeardown(r) => self.teardowns.lock().unwrap().push(r.clone()),
                    StepsItem::Repeat(r) => self.run_repeat(r).await,
                }
            }
            join_all(launched).await;
        })
    }

    async fn run_repeat(self: &Arc<Self>, repeat: &Repeat) {
        let entry = self.clock.now();
        let mut done = 0u32;
        loop {
            let expired = repeat.iterations.is_some_and(|n| done >= n)
                || repeat.during.is_some_and(|d| self.clock.now() - entry >= d)
                || repeat.until.is_some_and(|u| self.clock.wall_now() >= u);
            if expired || self.panic.is_cancelled() {
                break;
            }
            self.run_block(&repeat.body).await;
            done += 1;
        }
    }

    async fn run_step(self: Arc<Self>, idx: usize, step: Step) {
        if let Some(start) = step.start {
            let at = self.offset(start);
            tokio::select! {
                _ = self.panic.cancelled() => return,
                _ = self.clock.sleep_until(at) => {}
            }
        }
        let scope = Scope::Step(idx);
        let started = self.scoped(EventKind::StepStart, scope)
            .tasklist(&step.tasklist)
            .detail(format!("targets {}", step.targets));
        if !self.emit_unless_panicked(started) {
            return;
        }
        let nodes = self.resolve(scope, &step.targets);
        let stop = step.stop.map(|t| Deadline {
            at: self.offset(t),
            source: DeadlineSource::Stop,
        });
        let step_token = self.panic.child_token();
        let outcomes = match self.exp.tasklist(&step.tasklist) {
            Some(tl) => {
                join_all(nodes.iter().map(|n| {
                    self.run_node(scope, n.clone(), tl, stop, step_token.clone(), self.panic.clone(), true)
                }))
                .await
            }
            None => vec![NodeOutcome::Skipped; nodes.len()],
        };
        let mut end = self.scoped(EventKind::StepEnd, scope).tasklist(&step.tasklist);
        end.nodes = Some(
            nodes
                .iter()
                .map(|n| n.name().to_string())
                .zip(outcomes)
                .collect::<BTreeMap<_, _>>(),
        );
        self.emit(end);
    }

    async fn drain_teardowns(self: &Arc<Self>) {
        let registered = std::mem::take(&mut *self.teardowns.lock().unwrap());
        for (n, reg) in registered.iter().enumerate().rev() {
            let scope = Scope::Teardown(n);
            self.emit(
                self.scoped(EventKind::TeardownStart, scope)
                    .tasklist(&reg.tasklist)
                    .detail(format!("targets {}", reg.targets)),
            );
            let nodes = self.resolve(scope, &reg.targets);
            let root = CancellationToken::new();
            let outcomes = match self.exp.tasklist(&reg.tasklist) {
                Some(tl) => {
                    join_all(
                        nodes
                            .iter()
                            .map(|node| self.run_node(scope, node.clone(), tl, None, root.clone(), root.clone(), false)),
                    )
                    .await
                }
                None => vec![NodeOutcome::Skipped; nodes.len()],
            };
            let mut end = self.scoped(EventKind::TeardownEnd, scope).tasklist(&reg.tasklist);
            end.nodes = Some(
                nodes
                    .iter()
                    .map(|n| n.name().to_string())
                    .zip(outcomes)
                    .collect(),
            );
            self.emit(end);
        }
    }

    #[allow(clippy::too_many_arguments)]
    async fn run_node(
        &self,
        scope: Scope,
        node: ResolvedNode,
        tasklist: &Tasklist,
        stop: Option<Deadline>,
        step_token: CancellationToken,
        cleanup_root: CancellationToken,
        escalate: bool,
    ) -> NodeOutcome {
        let run = NodeRun {
            scope,
            node,
            cleanup_root,
            step_token,
            failed: AtomicBool::new(false),
            started: AtomicBool::new(false),
            capture_names: Mutex::new(HashSet::new()),
        };
        let timeout = tasklist.timeout.map(|t| Deadline {
            at: self.clock.now() + t,
            source: DeadlineSource::Timeout,
        });
        let frame = Frame {
            tasklist,
            token: run.step_token.child_token(),
            deadline: earliest(stop, timeout),
            escalate,
        };
        let flow = self.exec_body(&run, &frame, &[]).await;
        if let Some(cleanup) = &tasklist.cleanup {
            self.run_cleanup(&run, cleanup).await;
        }
        if run.failed.load(Ordering::SeqCst) {
            NodeOutcome::Failed
        } else {
            match flow {
                Flow::Ok => NodeOutcome::Succeeded,
                Flow::Stopped => NodeOutcome::Aborted,
                Flow::Cancelled | Flow::Failed if !run.started.load(Ordering::SeqCst) => NodeOutcome::Skipped,
                Flow::Cancelled | Flow::Failed => NodeOutcome::Aborted,
            }
        }
    }

    fn run_cleanup<'a>(&'a self, run: &'a NodeRun, name: &'a str) -> BoxFuture<'a, ()> {
        Box::pin(async move {
            let Some(tl) = self.exp.tasklist(name) else {
                return;
            };
            let frame = Frame {
                tasklist: tl,
                token: run.cleanup_root.child_token(),
                deadline: tl.timeout.map(|t| Deadline {
                    at: self.clock.now() + t,
                    source: DeadlineSource::Timeout,
                }),
                escalate: false,
            };
            self.exec_body(run, &frame, &[]).await;
            if let Some(next) = &tl.cleanup {
                self.run_cleanup(run, next).await;
            }
        })
    }

    async fn exec_body(&self, run: &NodeRun, frame: &Frame<'_>, path: &[usize]) -> Flow {
        for (i, task) in frame.tasklist.tasks.iter().enumerate() {
            let flow = self.exec_task(run, frame, task, child_path(path, i)).await;
            if flow != Flow::Ok {
                return flow;
            }
        }
        Flow::Ok
    }

    fn exec_task<'a>(
        &'a self,
        run: &'a NodeRun,
        frame: &'a Frame<'a>,
        task: &'a Task,
        path: Vec<usize>,
    ) -> BoxFuture<'a, Flow> {
        Box::pin(async move {
            match task {
                Task::Seq(children) => {
                    for (i, child) in children.iter().enumerate() {
                        let flow = self.exec_task(run, frame, child, child_path(&path, i)).await;
                        if flow != Flow::Ok {
                            return flow;
                        }
                    }
                    Flow::Ok
                }
                Task::Par(children) => combine(
                    join_all(
                        children
                            .iter()
                            .enumerate()
                            .map(|(i, child)| self.exec_task(run, frame, child, child_path(&path, i))),
                    )
                    .await,
                ),
                Task::Call(name) => self.exec_call(run, frame, name, path).await,
                leaf => self.exec_leaf(run, frame, leaf, path).await,
            }
        })
    }

    async fn exec_call(&self, run: &NodeRun, frame: &Frame<'_>, name: &str, path: Vec<usize>) -> Flow {
        let Some(callee) = self.exp.tasklist(name) else {
            self.on_failure(run, frame);
            return Flow::Failed;
        };
        let timeout = callee.timeout.map(|t| Deadline {
            at: self.clock.now() + t,
            source: DeadlineSource::Timeout,
        });
        let inner = Frame {
            tasklist: callee,
            token: frame.token.child_token(),
            deadline: earliest(frame.deadline, timeout),
            escalate: frame.escalate,
        };
        let flow = self.exec_body(run, &inner, &path).await;
        if flow == Flow::Failed {
            if let Some(cleanup) = &callee.cleanup {
                self.run_cleanup(run, cleanup).await;
            }
            // abort-tasklist ends only the callee; the caller carries on
            if !inner.escalate || callee.on_error == ErrorMode::AbortTasklist {
                return Flow::Ok;
            }
        }
        flow
    }

    /// Applies the frame's failure mode.
    fn on_failure(&self, run: &NodeRun, frame: &Frame<'_>) {
        run.failed.store(true, Ordering::SeqCst);
        let mode = if frame.escalate {
            frame.tasklist.on_error
        } else {
            ErrorMode::AbortTasklist
        };
        match mode {
            ErrorMode::AbortTasklist => frame.token.cancel(),
            ErrorMode::AbortStep => run.step_token.cancel(),
            ErrorMode::Panic => {
                let ev = self
                    .scoped(EventKind::Panic, run.scope)
                    .node(run.node.name())
                    .tasklist(&frame.tasklist.name)
                    .detail("task failed in a tasklist with on-error=panic");
                let panic = &self.panic;
                let _ = self.sink.record_if(ev, || {
                    if panic.is_cancelled() {
                        false
                    } else {
                        panic.cancel();
                        true
                    }
                });
            }
        }
    }

    fn expired(&self, run: &NodeRun, frame: &Frame<'_>, deadline: Deadline) -> Flow {
        match deadline.source {
            DeadlineSource::Stop => Flow::Stopped,
            DeadlineSource::Timeout => {
                self.on_failure(run, frame);
                Flow::Failed
            }
        }
    }

    async fn exec_leaf(&self, run: &NodeRun, frame: &Frame<'_>, task: &Task, path: Vec<usize>) -> Flow {
        if frame.token.is_cancelled() {
            return Flow::Cancelled;
        }
        if let Some(dl) = frame.deadline {
            if self.clock.now() >= dl.at {
                return self.expired(run, frame, dl);
            }
        }
        let start = self
            .scoped(EventKind::TaskStart, run.scope)
            .node(run.node.name())
            .tasklist(&frame.tasklist.name)
            .task_path(path.clone())
            .detail(describe(task));
        let token = &frame.token;
        match self.sink.record_if(start, || !token.is_cancelled()) {
            Ok(true) => {}
            Ok(false) => return Flow::Cancelled,
            Err(_) => {
                self.panic.cancel();
                return Flow::Cancelled;
            }
        }
        run.started.store(true, Ordering::SeqCst);

        let end = self.perform(run, frame, task, &path).await;
        let mut ev = self
            .scoped(EventKind::TaskEnd, run.scope)
            .node(run.node.name())
            .tasklist(&frame.tasklist.name)
            .task_path(path)
            .detail(end.detail);
        ev.outcome = Some(end.outcome);
        ev.exit_code = end.exit_code;
        ev.captures = end.captures;
        ev.fetched = end.fetched;
        self.emit(ev);

        match end.outcome {
            TaskOutcome::Success => Flow::Ok,
            TaskOutcome::Aborted | TaskOutcome::Skipped => Flow::Cancelled,
            TaskOutcome::TimedOut => match frame.deadline {
                Some(dl) => self.expired(run, frame, dl),
                None => {
                    self.on_failure(run, frame);
                    Flow::Failed
                }
            },
            TaskOutcome::Failed | TaskOutcome::ConnectionLost => {
                self.on_failure(run, frame);
                Flow::Failed
            }
        }
    }

    fn capture_path(&self, run: &NodeRun, frame: &Frame<'_>, path: &[usize], stream: &str) -> Option<PathBuf> {
        let dir = self.run_dir.node_dir(run.node.name()).ok()?;
        let indices: Vec<String> = path.iter().map(usize::to_string).collect();
        let base = format!(
            "{stream}-{}-{}-{}",
            run.scope.label(),
            crate::telemetry::sanitize_component(&frame.tasklist.name),
            indices.join(".")
        );
        let mut names = run.capture_names.lock().unwrap();
        let mut name = base.clone();
        let mut n = 1;
        while !names.insert(name.clone()) {
            n += 1;
            name = format!("{base}~{n}");
        }
        Some(dir.join(format!("{name}.log")))
    }

    async fn perform(&self, run: &NodeRun, frame: &Frame<'_>, task: &Task, path: &[usize]) -> LeafEnd {
        let deadline = frame.deadline.map(|d| d.at);
        let wait_deadline = || async move {
            match deadline {
                Some(at) => self.clock.sleep_until(at).await,
                None => std::future::pending().await,
            }
        };
        let session = tokio::select! {
            biased;
            r = self.pool.acquire(&run.node.target) => r,
            _ = frame.token.cancelled() => return LeafEnd::of(TaskOutcome::Aborted, "cancelled while connecting"),
            _ = wait_deadline() => return LeafEnd::of(TaskOutcome::TimedOut, "deadline passed while connecting"),
        };
        let session = match session {
            Ok(s) => s,
            Err(e) => return LeafEnd::of(e.task_outcome(), e.to_string()),
        };
        let failed = |e: TransportError| LeafEnd::of(e.task_outcome(), e.to_string());

        match task {
            Task::Run(command) => {
                let out = self.capture_path(run, frame, path, "stdout");
                let err = self.capture_path(run, frame, path, "stderr");
                let req = ExecRequest {
                    command,
                    env: &run.node.env,
                    deadline,
                    cancel: &frame.token,
                    clock: &self.clock,
                    stdout: out.as_deref(),
                    stderr: err.as_deref(),
                };
                match session.exec(&req).await {
                    Ok(result) => LeafEnd {
                        outcome: result.outcome,
                        exit_code: Some(result.exit_code).filter(|c| *c >= 0),
                        captures: [out, err]
                            .iter()
                            .flatten()
                            .map(|p| self.run_dir.relative(p))
                            .collect(),
                        fetched: None,
                        detail: String::new(),
                    },
                    Err(e) => failed(e),
                }
            }
            Task::Get(remote) => {
                let fetched = tokio::select! {
                    biased;
                    r = session.fetch(remote, self.run_dir.path()) => r,
                    _ = frame.token.cancelled() => return LeafEnd::of(TaskOutcome::Aborted, "cancelled"),
                    _ = wait_deadline() => return LeafEnd::of(TaskOutcome::TimedOut, "deadline passed"),
                };
                match fetched {
                    Ok(p) => LeafEnd {
                        fetched: Some(self.run_dir.relative(&p)),
                        ..LeafEnd::of(TaskOutcome::Success, "")
                    },
                    Err(e) => failed(e),
                }
            }
            Task::Put(local) => {
                let source = self.put_base.join(local);
                let remote = Path::new(local)
                    .file_name()
                    .map(|n| n.to_string_lossy().into_owned())
                    .unwrap_or_else(|| local.clone());
                let pushed = tokio::select! {
                    biased;
                    r = session.push(&source, &remote) => r,
                    _ = frame.token.cancelled() => return LeafEnd::of(TaskOutcome::Aborted, "cancelled"),
                    _ = wait_deadline() => return LeafEnd::of(TaskOutcome::TimedOut, "deadline passed"),
                };
                match pushed {
                    Ok(()) => LeafEnd::of(TaskOutcome::Success, ""),
                    Err(e) => failed(e),
                }
            }
            Task::Seq(_) | Task::Par(_) | Task::Call(_) => unreachable!("composite tasks are not leaves"),
        }
    }
}
