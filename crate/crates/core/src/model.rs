//! In-memory representation of an experiment and of its execution outcomes.
//!
//! Values in this module are immutable once produced by the parser and can be
//! shared freely between concurrent executors.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;
use std::path::PathBuf;
use std::time::Duration;

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};

use crate::telemetry::ExecutionEvent;

/// A fully resolved experiment: every include merged, every reference checked.
#[derive(Debug, Clone, PartialEq)]
pub struct Experiment {
    pub targets: Vec<TargetDef>,
    pub tasklists: Vec<Tasklist>,
    pub steps: StepsProgram,
    pub source_documents: Vec<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Local,
    Ssh,
    PlanetLab,
    Group,
}

impl fmt::Display for TargetKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TargetKind::Local => "local",
            TargetKind::Ssh => "ssh",
            TargetKind::PlanetLab => "planetlab",
            TargetKind::Group => "group",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EnvVar {
    pub name: String,
    pub value: String,
}

impl EnvVar {
    pub fn new(name: impl Into<String>, value: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            value: value.into(),
        }
    }
}

/// Member of a group target: either defined in place or a reference to a
/// target defined elsewhere in the experiment.
#[derive(Debug, Clone, PartialEq)]
pub enum GroupMember {
    Inline(TargetDef),
    Ref(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetDef {
    pub name: String,
    pub kind: TargetKind,
    pub ssh_user: Option<String>,
    pub ssh_password: Option<String>,
    pub ssh_host: Option<String>,
    pub planetlab_api_url: Option<String>,
    pub planetlab_slice: Option<String>,
    pub planetlab_user: Option<String>,
    pub members: Vec<GroupMember>,
    pub env_exports: Vec<EnvVar>,
}

impl TargetDef {
    fn bare(name: impl Into<String>, kind: TargetKind) -> Self {
        Self {
            name: name.into(),
            kind,
            ssh_user: None,
            ssh_password: None,
            ssh_host: None,
            planetlab_api_url: None,
            planetlab_slice: None,
            planetlab_user: None,
            members: Vec::new(),
            env_exports: Vec::new(),
        }
    }

    pub fn local(name: impl Into<String>) -> Self {
        Self::bare(name, TargetKind::Local)
    }

    pub fn ssh(name: impl Into<String>, user: impl Into<String>, host: impl Into<String>) -> Self {
        let mut t = Self::bare(name, TargetKind::Ssh);
        t.ssh_user = Some(user.into());
        t.ssh_host = Some(host.into());
        t
    }

    pub fn planetlab(
        name: impl Into<String>,
        api_url: impl Into<String>,
        slice: impl Into<String>,
        user: impl Into<String>,
    ) -> Self {
        let mut t = Self::bare(name, TargetKind::PlanetLab);
        t.planetlab_api_url = Some(api_url.into());
        t.planetlab_slice = Some(slice.into());
        t.planetlab_user = Some(user.into());
        t
    }

    pub fn group(name: impl Into<String>, members: Vec<GroupMember>) -> Self {
        let mut t = Self::bare(name, TargetKind::Group);
        t.members = members;
        t
    }

    pub fn with_env(mut self, name: impl Into<String>, value: impl Into<String>) -> Self {
        self.env_exports.push(EnvVar::new(name, value));
        self
    }

    pub fn is_leaf(&self) -> bool {
        self.kind != TargetKind::Group
    }

    /// Checks the per-kind field requirements. Empty groups are accepted here
    /// because filtering and slice expansion may legitimately produce them;
    /// the parser rejects empty groups in documents.
    pub fn shape_errors(&self) -> Vec<String> {
        let mut errs = Vec::new();
        let has_ssh = self.ssh_user.is_some() || self.ssh_password.is_some() || self.ssh_host.is_some();
        let has_pl = self.planetlab_api_url.is_some()
            || self.planetlab_slice.is_some()
            || self.planetlab_user.is_some();
        match self.kind {
            TargetKind::Local => {
                if has_ssh || has_pl {
                    errs.push(format!("local target '{}' must not carry connection fields", self.name));
                }
            }
            TargetKind::Ssh => {
                if self.ssh_host.is_none() {
                    errs.push(format!("ssh target '{}' requires a host", self.name));
                }
                if self.ssh_user.is_none() {
                    errs.push(format!("ssh target '{}' requires a user", self.name));
                }
                if has_pl {
                    errs.push(format!("ssh target '{}' must not carry planetlab fields", self.name));
                }
            }
            TargetKind::PlanetLab => {
                if self.planetlab_api_url.is_none()
                    || self.planetlab_slice.is_none()
                    || self.planetlab_user.is_none()
                {
                    errs.push(format!(
                        "planetlab target '{}' requires api-url, slice and user",
                        self.name
                    ));
                }
                if self.ssh_user.is_some() || self.ssh_host.is_some() {
                    errs.push(format!("planetlab target '{}' must not carry ssh fields", self.name));
                }
            }
            TargetKind::Group => {
                if has_ssh || has_pl {
                    errs.push(format!("group target '{}' must not carry connection fields", self.name));
                }
            }
        }
        if self.kind != TargetKind::Group && !self.members.is_empty() {
            errs.push(format!("non-group target '{}' has members", self.name));
        }
        errs
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorMode {
    #[default]
    AbortTasklist,
    AbortStep,
    Panic,
}

impl ErrorMode {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorMode::AbortTasklist => "abort-tasklist",
            ErrorMode::AbortStep => "abort-step",
            ErrorMode::Panic => "panic",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "abort-tasklist" => Some(ErrorMode::AbortTasklist),
            "abort-step" => Some(ErrorMode::AbortStep),
            "panic" => Some(ErrorMode::Panic),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Task {
    Run(String),
    Get(String),
    Put(String),
    Seq(Vec<Task>),
    Par(Vec<Task>),
    Call(String),
}

impl Task {
    /// Calls made anywhere inside this task tree, in document order.
    pub fn calls(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_calls(&mut out);
        out
    }

    fn collect_calls<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Task::Call(r) => out.push(r),
            Task::Seq(children) | Task::Par(children) => {
                children.iter().for_each(|c| c.collect_calls(out))
            }
            Task::Run(_) | Task::Get(_) | Task::Put(_) => {}
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tasklist {
    pub name: String,
    pub tasks: Vec<Task>,
    pub on_error: ErrorMode,
    pub timeout: Option<Duration>,
    pub cleanup: Option<String>,
}

impl Tasklist {
    pub fn new(name: impl Into<String>, tasks: Vec<Task>) -> Self {
        Self {
            name: name.into(),
            tasks,
            on_error: ErrorMode::default(),
            timeout: None,
            cleanup: None,
        }
    }

    pub fn calls(&self) -> Vec<&str> {
        self.tasks.iter().flat_map(Task::calls).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TimeSpec {
    /// Offset from the start of the experiment.
    Relative(Duration),
    Absolute(DateTime<Utc>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Step {
    pub tasklist: String,
    pub targets: String,
    pub start: Option<TimeSpec>,
    pub stop: Option<TimeSpec>,
}

impl Step {
    pub fn new(tasklist: impl Into<String>, targets: impl Into<String>) -> Self {
        Self {
            tasklist: tasklist.into(),
            targets: targets.into(),
            start: None,
            stop: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegisterTeardown {
    pub tasklist: String,
    pub targets: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Repeat {
    pub body: Vec<StepsItem>,
    pub iterations: Option<u32>,
    pub during: Option<Duration>,
    pub until: Option<DateTime<Utc>>,
}

impl Repeat {
    pub fn is_bounded(&self) -> bool {
        self.iterations.is_some() || self.during.is_some() || self.until.is_some()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StepsItem {
    Step(Step),
    Synchronize,
    RegisterTeardown(RegisterTeardown),
    Repeat(Repeat),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StepsProgram {
    pub items: Vec<StepsItem>,
}

impl StepsProgram {
    /// Upper bound on the number of step executions, available only when
    /// every repeat carries an iteration count.
    pub fn static_step_bound(&self) -> Option<u64> {
        fn walk(items: &[StepsItem]) -> Option<u64> {
            let mut total: u64 = 0;
            for item in items {
                match item {
                    StepsItem::Step(_) => total = total.checked_add(1)?,
                    StepsItem::Repeat(r) => {
                        let body = walk(&r.body)?;
                        total = total.checked_add(body.checked_mul(u64::from(r.iterations?))?)?;
                    }
                    StepsItem::Synchronize | StepsItem::RegisterTeardown(_) => {}
                }
            }
            Some(total)
        }
        walk(&self.items)
    }

    /// Visits every item, descending into repeat bodies.
    pub fn walk<'a>(&'a self, f: &mut impl FnMut(&'a StepsItem)) {
        fn go<'a>(items: &'a [StepsItem], f: &mut impl FnMut(&'a StepsItem)) {
            for item in items {
                f(item);
                if let StepsItem::Repeat(r) = item {
                    go(&r.body, f);
                }
            }
        }
        go(&self.items, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TaskOutcome {
    Success,
    Failed,
    TimedOut,
    ConnectionLost,
    Skipped,
    /// Cancelled while running because the step or the experiment was aborted.
    Aborted,
}

impl TaskOutcome {
    pub fn is_failure(self) -> bool {
        matches!(
            self,
            TaskOutcome::Failed | TaskOutcome::TimedOut | TaskOutcome::ConnectionLost
        )
    }
}

impl fmt::Display for TaskOutcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

/// Result of one leaf task on one node. Instants are offsets from the start
/// of the experiment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskResult {
    pub node: String,
    pub exit_code: i32,
    #[serde(with = "millis")]
    pub started: Duration,
    #[serde(with = "millis")]
    pub finished: Duration,
    pub stdout_ref: Option<PathBuf>,
    pub stderr_ref: Option<PathBuf>,
    pub outcome: TaskOutcome,
}

mod millis {
    use serde::{Deserialize, Deserializer, Serializer};
    use std::time::Duration;

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        Ok(Duration::from_millis(u64::deserialize(d)?))
    }
}

/// Per-node result of running one tasklist occurrence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum NodeOutcome {
    Succeeded,
    Failed,
    Aborted,
    Skipped,
}

impl NodeOutcome {
    pub fn is_error(self) -> bool {
        matches!(self, NodeOutcome::Failed | NodeOutcome::Aborted)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Overall {
    Completed,
    CompletedWithErrors,
    Panicked,
}

impl Overall {
    pub fn exit_code(self) -> i32 {
        match self {
            Overall::Completed => 0,
            Overall::CompletedWithErrors => 2,
            Overall::Panicked => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSummary {
    pub node: String,
    /// Which tasklist execution this is, e.g. `step 3` or `teardown 0`.
    pub occurrence: String,
    pub tasklist: String,
    pub outcome: NodeOutcome,
    pub tasks_run: usize,
    pub tasks_failed: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub events: Vec<ExecutionEvent>,
    pub per_node_outcomes: Vec<NodeSummary>,
    pub overall: Overall,
    pub fetched_artifacts: Vec<String>,
    pub output_captures: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ModelError {
    #[error("unknown target '{0}'")]
    UnknownTarget(String),
    #[error("group '{0}' contains itself")]
    GroupCycle(String),
}

/// A leaf node reached from a target, with its effective environment.
#[derive(Debug, Clone, PartialEq)]
pub struct ResolvedNode {
    pub target: TargetDef,
    pub env: Vec<EnvVar>,
}

impl ResolvedNode {
    pub fn name(&self) -> &str {
        &self.target.name
    }
}

/// Applies `inner` on top of `outer`: later definitions replace the value of an
/// existing variable in place, new variables are appended.
pub fn merge_env(outer: &[EnvVar], inner: &[EnvVar]) -> Vec<EnvVar> {
    let mut env = outer.to_vec();
    for var in inner {
        match env.iter_mut().find(|e| e.name == var.name) {
            Some(existing) => existing.value = var.value.clone(),
            None => env.push(var.clone()),
        }
    }
    env
}

/// Flattens `target` into the leaf nodes it denotes.
///
/// Leaves are returned in depth-first document order, deduplicated by name
/// (first occurrence wins). Each leaf's environment is the chain of exports
/// from the outermost group down to the leaf, inner values overriding outer.
pub fn resolve_group(
    target: &TargetDef,
    all_targets: &HashMap<&str, &TargetDef>,
) -> Result<Vec<ResolvedNode>, ModelError> {
    let mut out = Vec::new();
    let mut seen = BTreeSet::new();
    let mut stack = Vec::new();
    resolve_into(target, &[], all_targets, &mut stack, &mut seen, &mut out)?;
    Ok(out)
}

fn resolve_into<'a>(
    target: &'a TargetDef,
    inherited: &[EnvVar],
    all: &HashMap<&str, &'a TargetDef>,
    stack: &mut Vec<&'a str>,
    seen: &mut BTreeSet<String>,
    out: &mut Vec<ResolvedNode>,
) -> Result<(), ModelError> {
    let env = merge_env(inherited, &target.env_exports);
    if target.is_leaf() {
        if seen.insert(target.name.clone()) {
            out.push(ResolvedNode {
                target: target.clone(),
                env,
            });
        }
        return Ok(());
    }
    if stack.contains(&target.name.as_str()) {
        return Err(ModelError::GroupCycle(target.name.clone()));
    }
    stack.push(&target.name);
    for member in &target.members {
        let member: &TargetDef = match member {
            GroupMember::Inline(t) => t,
            GroupMember::Ref(name) => all
                .get(name.as_str())
                .copied()
                .ok_or_else(|| ModelError::UnknownTarget(name.clone()))?,
        };
        resolve_into(member, &env, all, stack, seen, out)?;
    }
    stack.pop();
    Ok(())
}

impl Experiment {
    /// Every target by name, including those defined inside groups.
    pub fn target_index(&self) -> HashMap<&str, &TargetDef> {
        fn add<'a>(t: &'a TargetDef, map: &mut HashMap<&'a str, &'a TargetDef>) {
            map.entry(t.name.as_str()).or_insert(t);
            for m in &t.members {
                if let GroupMember::Inline(inner) = m {
                    add(inner, map);
                }
            }
        }
        let mut map = HashMap::new();
        for t in &self.targets {
            add(t, &mut map);
        }
        map
    }

    pub fn tasklist(&self, name: &str) -> Option<&Tasklist> {
        self.tasklists.iter().find(|t| t.name == name)
    }

    pub fn resolve_target(&self, name: &str) -> Result<Vec<ResolvedNode>, ModelError> {
        let index = self.target_index();
        let target = index
            .get(name)
            .ok_or_else(|| ModelError::UnknownTarget(name.to_string()))?;
        resolve_group(target, &index)
    }

    /// Tasklists ordered so that every callee precedes its callers, or `None`
    /// when the call graph has a cycle.
    pub fn call_topological_order(&self) -> Option<Vec<&str>> {
        let names: Vec<&str> = self.tasklists.iter().map(|t| t.name.as_str()).collect();
        let mut remaining: BTreeMap<&str, BTreeSet<&str>> = self
            .tasklists
            .iter()
            .map(|t| {
                let callees = t.calls().into_iter().filter(|c| names.contains(c)).collect();
                (t.name.as_str(), callees)
            })
            .collect();
        let mut order = Vec::new();
        while !remaining.is_empty() {
            let ready: Vec<&str> = remaining
                .iter()
                .filter(|(_, callees)| callees.is_empty())
                .map(|(n, _)| *n)
                .collect();
            if ready.is_empty() {
                return None;
            }
            for n in ready {
                remaining.remove(n);
                for callees in remaining.values_mut() {
                    callees.remove(n);
                }
                order.push(n);
            }
        }
        Some(order)
    }

    /// Checks every structural invariant of a valid experiment and returns the
    /// violations found.
    pub fn audit(&self) -> Vec<String> {
        let mut errs = Vec::new();

        let mut target_names = BTreeSet::new();
        fn all_targets<'a>(t: &'a TargetDef, out: &mut Vec<&'a TargetDef>) {
            out.push(t);
            for m in &t.members {
                if let GroupMember::Inline(inner) = m {
                    all_targets(inner, out);
                }
            }
        }
        let mut flat = Vec::new();
        self.targets.iter().for_each(|t| all_targets(t, &mut flat));
        for t in &flat {
            if !target_names.insert(t.name.as_str()) {
                errs.push(format!("duplicate target name '{}'", t.name));
            }
            errs.extend(t.shape_errors());
        }
        let index = self.target_index();
        for t in &flat {
            for m in &t.members {
                if let GroupMember::Ref(r) = m {
                    if !index.contains_key(r.as_str()) {
                        errs.push(format!("group '{}' references unknown target '{}'", t.name, r));
                    }
                }
            }
            if t.kind == TargetKind::Group {
                if let Err(e) = resolve_group(t, &index) {
                    errs.push(e.to_string());
                }
            }
        }

        let mut tl_names = BTreeSet::new();
        for tl in &self.tasklists {
            if !tl_names.insert(tl.name.as_str()) {
                errs.push(format!("duplicate tasklist name '{}'", tl.name));
            }
            if tl.timeout == Some(Duration::ZERO) {
                errs.push(format!("tasklist '{}' has a zero timeout", tl.name));
            }
            for c in tl.calls() {
                if !tl_names_contains(&self.tasklists, c) {
                    errs.push(format!("tasklist '{}' calls unknown tasklist '{}'", tl.name, c));
                }
            }
            if let Some(c) = &tl.cleanup {
                if !tl_names_contains(&self.tasklists, c) {
                    errs.push(format!("tasklist '{}' has unknown cleanup '{}'", tl.name, c));
                }
            }
        }
        if self.call_topological_order().is_none() {
            errs.push("call graph has a cycle".to_string());
        }
        for tl in &self.tasklists {
            let mut chain = vec![tl.name.as_str()];
            let mut cur = tl;
            while let Some(next) = cur.cleanup.as_deref().and_then(|c| self.tasklist(c)) {
                if chain.contains(&next.name.as_str()) {
                    errs.push(format!("cleanup chain of '{}' is cyclic", tl.name));
                    break;
                }
                chain.push(&next.name);
                cur = next;
            }
        }

        self.steps.walk(&mut |item| match item {
            StepsItem::Step(s) => {
                if !tl_names_contains(&self.tasklists, &s.tasklist) {
                    errs.push(format!("step references unknown tasklist '{}'", s.tasklist));
                }
                if !index.contains_key(s.targets.as_str()) {
                    errs.push(format!("step references unknown target '{}'", s.targets));
                }
                if let (Some(TimeSpec::Relative(a)), Some(TimeSpec::Relative(b))) = (s.start, s.stop) {
                    if a >= b {
                        errs.push(format!("step '{}' starts after it stops", s.tasklist));
                    }
                }
            }
            StepsItem::RegisterTeardown(r) => {
                if !tl_names_contains(&self.tasklists, &r.tasklist) {
                    errs.push(format!("teardown references unknown tasklist '{}'", r.tasklist));
                }
                if !index.contains_key(r.targets.as_str()) {
                    errs.push(format!("teardown references unknown target '{}'", r.targets));
                }
            }
            StepsItem::Repeat(r) => {
                if !r.is_bounded() {
                    errs.push("repeat without bound".to_string());
                }
                if r.iterations == Some(0) {
                    errs.push("repeat with zero iterations".to_string());
                }
            }
            StepsItem::Synchronize => {}
        });
        errs
    }
}

fn tl_names_contains(tasklists: &[Tasklist], name: &str) -> bool {
    tasklists.iter().any(|t| t.name == name)
}
