//! Scripted, deterministic transport for dry runs and tests.
//!
//! Every node answers from a [`NodeScript`]: commands are matched against
//! ordered regex rules which fix exit code, output and a duration on the
//! experiment clock. Connection drops and outages are scheduled instants.
//! Unmatched commands succeed instantly with no output.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, LazyLock, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use regex::Regex;
use serde::{Deserialize, Deserializer};

use super::{Connection, ExecEnd, ExecRequest, Transport, TransportError};
use crate::model::{EnvVar, TargetDef};
use crate::scheduler::Clock;

fn yes() -> bool {
    true
}

fn iso<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
    let s = String::deserialize(d)?;
    crate::parser::parse_duration(&s).map_err(serde::de::Error::custom)
}

fn iso_opt<'de, D: Deserializer<'de>>(d: D) -> Result<Option<Duration>, D::Error> {
    match Option::<String>::deserialize(d)? {
        Some(s) => crate::parser::parse_duration(&s)
            .map(Some)
            .map_err(serde::de::Error::custom),
        None => Ok(None),
    }
}

fn iso_list<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<Duration>, D::Error> {
    Vec::<String>::deserialize(d)?
        .iter()
        .map(|s| crate::parser::parse_duration(s).map_err(serde::de::Error::custom))
        .collect()
}

#[derive(Debug, thiserror::Error)]
pub enum MockScriptError {
    #[error("invalid mock script: {0}")]
    Json(#[from] serde_json::Error),
    #[error("invalid command pattern '{pattern}': {source}")]
    Pattern {
        pattern: String,
        source: regex::Error,
    },
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockScript {
    #[serde(default)]
    pub nodes: BTreeMap<String, NodeScript>,
    /// Behaviour of nodes without an entry of their own.
    #[serde(default)]
    pub default: NodeScript,
    /// Fetching a file the node does not have yields placeholder content
    /// instead of `RemoteFileMissing`.
    #[serde(default = "yes")]
    pub synthesize_missing_files: bool,
}

impl Default for MockScript {
    fn default() -> Self {
        Self {
            nodes: BTreeMap::new(),
            default: NodeScript::default(),
            synthesize_missing_files: true,
        }
    }
}

impl MockScript {
    pub fn from_json(text: &str) -> Result<Self, MockScriptError> {
        let script: MockScript = serde_json::from_str(text)?;
        for rule in script
            .nodes
            .values()
            .chain(std::iter::once(&script.default))
            .flat_map(|n| &n.rules)
        {
            Regex::new(&rule.pattern).map_err(|source| MockScriptError::Pattern {
                pattern: rule.pattern.clone(),
                source,
            })?;
        }
        Ok(script)
    }

    pub fn node(mut self, name: impl Into<String>, script: NodeScript) -> Self {
        self.nodes.insert(name.into(), script);
        self
    }

    pub fn with_default(mut self, script: NodeScript) -> Self {
        self.default = script;
        self
    }

    pub fn strict_files(mut self) -> Self {
        self.synthesize_missing_files = false;
        self
    }

    fn for_node(&self, name: &str) -> &NodeScript {
        self.nodes.get(name).unwrap_or(&self.default)
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeScript {
    #[serde(default = "yes")]
    pub available: bool,
    #[serde(default)]
    pub rules: Vec<MockRule>,
    /// Instants at which an established connection breaks.
    #[serde(default, deserialize_with = "iso_list")]
    pub drops: Vec<Duration>,
    /// Windows during which connection attempts fail.
    #[serde(default)]
    pub outages: Vec<Outage>,
    /// Initial remote files, by path.
    #[serde(default)]
    pub files: BTreeMap<String, String>,
}

impl Default for NodeScript {
    fn default() -> Self {
        Self {
            available: true,
            rules: Vec::new(),
            drops: Vec::new(),
            outages: Vec::new(),
            files: BTreeMap::new(),
        }
    }
}

impl NodeScript {
    pub fn unavailable(mut self) -> Self {
        self.available = false;
        self
    }

    pub fn rule(mut self, rule: MockRule) -> Self {
        self.rules.push(rule);
        self
    }

    pub fn drop_at(mut self, at: Duration) -> Self {
        self.drops.push(at);
        self
    }

    pub fn outage(mut self, from: Duration, until: Option<Duration>) -> Self {
        self.outages.push(Outage { from, until });
        self
    }

    pub fn file(mut self, path: impl Into<String>, content: impl Into<String>) -> Self {
        self.files.insert(path.into(), content.into());
        self
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MockRule {
    /// Regex searched for in the command after `$VAR` expansion.
    pub pattern: String,
    #[serde(default)]
    pub exit_code: i32,
    #[serde(default, deserialize_with = "iso")]
    pub duration: Duration,
    #[serde(default)]
    pub stdout: String,
    #[serde(default)]
    pub stderr: String,
}

impl MockRule {
    pub fn new(pattern: impl Into<String>) -> Self {
        Self {
            pattern: pattern.into(),
            exit_code: 0,
            duration: Duration::ZERO,
            stdout: String::new(),
            stderr: String::new(),
        }
    }

    pub fn exit(mut self, code: i32) -> Self {
        self.exit_code = code;
        self
    }

    pub fn takes(mut self, d: Duration) -> Self {
        self.duration = d;
        self
    }

    pub fn stdout(mut self, text: impl Into<String>) -> Self {
        self.stdout = text.into();
        self
    }

    pub fn stderr(mut self, text: impl Into<String>) -> Self {
        self.stderr = text.into();
        self
    }
}

#[derive(Debug, Clone, Copy, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Outage {
    #[serde(deserialize_with = "iso")]
    pub from: Duration,
    /// Open-ended when absent.
    #[serde(default, deserialize_with = "iso_opt")]
    pub until: Option<Duration>,
}

impl Outage {
    fn covers(&self, t: Duration) -> bool {
        t >= self.from && self.until.is_none_or(|u| t < u)
    }
}

/// One interaction with the mock, for assertions in tests.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum MockCall {
    Connect { node: String, at: Duration },
    Exec { node: String, at: Duration, command: String },
    Fetch { node: String, at: Duration, path: String },
    Push { node: String, at: Duration, path: String },
}

type RemoteFs = Arc<Mutex<BTreeMap<String, Vec<u8>>>>;

pub struct MockTransport {
    script: MockScript,
    patterns: HashMap<String, Arc<Vec<Regex>>>,
    default_patterns: Arc<Vec<Regex>>,
    fs: Mutex<HashMap<String, RemoteFs>>,
    log: Arc<Mutex<Vec<MockCall>>>,
}

fn compile(rules: &[MockRule]) -> Arc<Vec<Regex>> {
    Arc::new(
        rules
            .iter()
            .map(|r| Regex::new(&r.pattern).expect("pattern checked by MockScript::from_json"))
            .collect(),
    )
}

impl MockTransport {
    /// # Panics
    /// If a rule pattern is not a valid regex; [`MockScript::from_json`]
    /// rejects those.
    pub fn new(script: MockScript) -> Self {
        let patterns = script
            .nodes
            .iter()
            .map(|(n, s)| (n.clone(), compile(&s.rules)))
            .collect();
        let default_patterns = compile(&script.default.rules);
        Self {
            script,
            patterns,
            default_patterns,
            fs: Mutex::new(HashMap::new()),
            log: Arc::new(Mutex::new(Vec::new())),
        }
    }

    pub fn calls(&self) -> Vec<MockCall> {
        self.log.lock().unwrap().clone()
    }

    /// Current remote files of `node`.
    pub fn files(&self, node: &str) -> BTreeMap<String, Vec<u8>> {
        self.node_fs(node).lock().unwrap().clone()
    }

    fn node_fs(&self, node: &str) -> RemoteFs {
        self.fs
            .lock()
            .unwrap()
            .entry(node.to_string())
            .or_insert_with(|| {
                let initial = self
                    .script
                    .for_node(node)
                    .files
                    .iter()
                    .map(|(p, c)| (normalize(p), c.clone().into_bytes()))
                    .collect();
                Arc::new(Mutex::new(initial))
            })
            .clone()
    }
}

#[async_trait]
impl Transport for MockTransport {
    async fn connect(&self, target: &TargetDef, clock: &Clock) -> Result<Arc<dyn Connection>, TransportError> {
        let node = target.name.clone();
        let now = clock.now();
        self.log.lock().unwrap().push(MockCall::Connect {
            node: node.clone(),
            at: now,
        });
        let script = self.script.for_node(&node);
        if !script.available {
            return Err(TransportError::Unreachable(node));
        }
        if script.outages.iter().any(|o| o.covers(now)) {
            return Err(TransportError::ConnectFailed {
                node,
                reason: "scripted outage".into(),
            });
        }
        let patterns = self
            .patterns
            .get(&node)
            .cloned()
            .unwrap_or_else(|| self.default_patterns.clone());
        Ok(Arc::new(MockConnection {
            fs: self.node_fs(&node),
            node,
            script: script.clone(),
            patterns,
            established: now,
            clock: clock.clone(),
            log: self.log.clone(),
            synthesize: self.script.synthesize_missing_files,
            closed: AtomicBool::new(false),
        }))
    }
}

struct MockConnection {
    node: String,
    script: NodeScript,
    patterns: Arc<Vec<Regex>>,
    established: Duration,
    clock: Clock,
    fs: RemoteFs,
    log: Arc<Mutex<Vec<MockCall>>>,
    synthesize: bool,
    closed: AtomicBool,
}

fn normalize(path: &str) -> String {
    path.trim().trim_start_matches("./").to_string()
}

static VAR_REF: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\$\{([A-Za-z_][A-Za-z0-9_]*)\}|\$([A-Za-z_][A-Za-z0-9_]*)").unwrap());

/// Substitutes `$NAME` and `${NAME}` for variables present in `env`.
pub fn expand_env(command: &str, env: &[EnvVar]) -> String {
    let lookup = |name: &str| env.iter().rev().find(|v| v.name == name).map(|v| v.value.as_str());
    VAR_REF.replace_all(command, |caps: &regex::Captures| {
        let name = caps.get(1).or_else(|| caps.get(2)).unwrap().as_str();
        lookup(name).map_or_else(|| caps[0].to_string(), str::to_string)
    })
    .into_owned()
}

impl MockConnection {
    /// First scheduled drop after `after`, if any.
    fn next_drop(&self, after: Duration) -> Option<Duration> {
        self.script
            .drops
            .iter()
            .copied()
            .filter(|d| *d > after && *d > self.established)
            .min()
    }

    fn alive_at(&self, t: Duration) -> bool {
        !self.closed.load(Ordering::SeqCst)
            && !self
                .script
                .drops
                .iter()
                .any(|d| *d > self.established && *d <= t)
    }

    fn record(&self, call: MockCall) {
        self.log.lock().unwrap().push(call);
    }

    fn lost(&self) -> TransportError {
        TransportError::ConnectionLost(self.node.clone())
    }
}

fn write_capture(path: Option<&Path>, text: &str) -> Result<(), TransportError> {
    if let Some(p) = path {
        std::fs::write(p, text)?;
    }
    Ok(())
}

#[async_trait]
impl Connection for MockConnection {
    async fn exec(&self, req: &ExecRequest<'_>) -> Result<ExecEnd, TransportError> {
        let now = self.clock.now();
        let command = expand_env(req.command, req.env);
        self.record(MockCall::Exec {
            node: self.node.clone(),
            at: now,
            command: command.clone(),
        });
        if !self.alive_at(now) {
            return Ok(ExecEnd::ConnectionLost);
        }
        let rule = self
            .patterns
            .iter()
            .position(|re| re.is_match(&command))
            .map(|i| &self.script.rules[i]);
        let (exit, duration) = rule.map_or((0, Duration::ZERO), |r| (r.exit_code, r.duration));

        // Earliest event wins; ties go to completion, then the drop, then the deadline.
        let mut candidates = vec![(now + duration, 0, ExecEnd::Exited(exit))];
        if let Some(d) = self.next_drop(now) {
            candidates.push((d, 1, ExecEnd::ConnectionLost));
        }
        if let Some(dl) = req.deadline {
            candidates.push((dl.max(now), 2, ExecEnd::TimedOut));
        }
        let (at, _, end) = candidates
            .into_iter()
            .min_by_key(|(t, prio, _)| (*t, *prio))
            .unwrap();

        let end = tokio::select! {
            biased;
            _ = req.cancel.cancelled() => ExecEnd::Aborted,
            _ = self.clock.sleep_until(at) => end,
        };
        let (out, err) = match (end, rule) {
            (ExecEnd::Exited(_), Some(r)) => (r.stdout.as_str(), r.stderr.as_str()),
            _ => ("", ""),
        };
        write_capture(req.stdout, out)?;
        write_capture(req.stderr, err)?;
        Ok(end)
    }

    async fn fetch(&self, remote: &str, dest: &Path) -> Result<(), TransportError> {
        let now = self.clock.now();
        self.record(MockCall::Fetch {
            node: self.node.clone(),
            at: now,
            path: remote.to_string(),
        });
        if !self.alive_at(now) {
            return Err(self.lost());
        }
        let content = match self.fs.lock().unwrap().get(&normalize(remote)) {
            Some(c) => c.clone(),
            None if self.synthesize => format!("placeholder for {remote} from {}\n", self.node).into_bytes(),
            None => return Err(TransportError::RemoteFileMissing(remote.to_string())),
        };
        let partial = dest.with_extension("partial");
        std::fs::write(&partial, content)?;
        std::fs::rename(&partial, dest)?;
        Ok(())
    }

    async fn push(&self, local: &Path, remote: &str) -> Result<(), TransportError> {
        let now = self.clock.now();
        self.record(MockCall::Push {
            node: self.node.clone(),
            at: now,
            path: remote.to_string(),
        });
        let content = std::fs::read(local).map_err(|_| TransportError::LocalFileMissing(local.to_path_buf()))?;
        let dest = normalize(remote);
        let partial = format!("{dest}.partial");
        let mut fs = self.fs.lock().unwrap();
        fs.insert(partial.clone(), content);
        if !self.alive_at(now) {
            return Err(self.lost());
        }
        let content = fs.remove(&partial).unwrap_or_default();
        fs.insert(dest, content);
        Ok(())
    }

    fn is_alive(&self) -> bool {
        self.alive_at(self.clock.now())
    }

    async fn close(&self) {
        self.closed.store(true, Ordering::SeqCst);
    }
}
