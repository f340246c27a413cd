#![allow(dead_code)]

pub mod fake_plc;

use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{DateTime, Utc};
use gplmt::model::{Experiment, ExperimentReport};
use gplmt::parser::{load_experiment, parse_experiment_str};
use gplmt::scheduler::{simulate, RunOptions};
use gplmt::telemetry::{EventKind, ExecutionEvent, RunDir};
use gplmt::transport::mock::{MockCall, MockScript, MockTransport};
use gplmt::transport::{RateLimiterConfig, ReconnectPolicy};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("fixtures")
}

pub fn fixture(name: &str) -> PathBuf {
    fixtures().join(name)
}

/// Valid fixture documents, sorted by name.
pub fn valid_fixtures() -> Vec<PathBuf> {
    let mut out: Vec<PathBuf> = std::fs::read_dir(fixtures())
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|e| e == "xml"))
        .collect();
    out.sort();
    out
}

/// The mock script shipped next to a fixture, if any.
pub fn mock_script_path(doc: &Path) -> Option<PathBuf> {
    let p = doc.with_extension("mock.json");
    p.exists().then_some(p)
}

pub fn mock_script_for(doc: &Path) -> MockScript {
    match mock_script_path(doc) {
        Some(p) => MockScript::from_json(&std::fs::read_to_string(p).unwrap()).unwrap(),
        None => MockScript::default(),
    }
}

pub fn load(doc: &Path) -> Experiment {
    load_experiment(doc)
        .unwrap_or_else(|d| panic!("{}: {d:?}", doc.display()))
        .experiment
}

pub fn parse(xml: &str) -> Experiment {
    parse_experiment_str(xml, &fixtures().join("inline.xml"))
        .unwrap_or_else(|d| panic!("{d:?}"))
        .experiment
}

pub fn epoch() -> DateTime<Utc> {
    "2016-01-12T02:00:00Z".parse().unwrap()
}

pub struct DryRun {
    pub report: ExperimentReport,
    pub events: Vec<ExecutionEvent>,
    pub calls: Vec<MockCall>,
    pub mock: Arc<MockTransport>,
    pub dir: tempfile::TempDir,
}

impl DryRun {
    pub fn of(&self, kind: EventKind) -> Vec<&ExecutionEvent> {
        self.events.iter().filter(|e| e.kind == kind).collect()
    }

    pub fn run_dir(&self) -> PathBuf {
        self.dir.path().join("run")
    }

    pub fn exec_count(&self, command: &str) -> usize {
        self.calls
            .iter()
            .filter(|c| matches!(c, MockCall::Exec { command: cmd, .. } if cmd == command))
            .count()
    }
}

pub fn dry_run_with(exp: Experiment, script: MockScript, limiter: Option<RateLimiterConfig>) -> DryRun {
    let dir = tempfile::tempdir().unwrap();
    let mock = Arc::new(MockTransport::new(script));
    let options = RunOptions {
        transport: mock.clone(),
        limiter,
        reconnect: ReconnectPolicy::default(),
        run_dir: RunDir::create_at(&dir.path().join("run")).unwrap(),
        put_base: fixtures(),
    };
    let (report, events) = simulate(Arc::new(exp), epoch(), false, options).unwrap();
    DryRun {
        report,
        events,
        calls: mock.calls(),
        mock,
        dir,
    }
}

pub fn dry_run(exp: Experiment, script: MockScript) -> DryRun {
    dry_run_with(exp, script, None)
}

/// Runs the command line in-process; returns exit code, stdout and stderr.
pub fn cli(args: &[&str]) -> (i32, String, String) {
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let argv = std::iter::once("gplmt").chain(args.iter().copied()).map(String::from);
    let code = gplmt::cli::main_with(argv, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}
