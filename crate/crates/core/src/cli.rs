//! Command-line front end.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::Utc;
use clap::{Args, Parser, Subcommand};

use crate::model::{merge_env, EnvVar, Experiment, GroupMember, ModelError, TargetDef};
use crate::parser::{load_experiment, Diagnostic};
use crate::planetlab;
use crate::scheduler::{real_runtime, run_experiment, simulate, Clock, RunOptions};
use crate::telemetry::{render_report, EventKind, EventSink, ExecutionEvent, RunDir};
use crate::transport::local::LocalTransport;
use crate::transport::mock::{MockScript, MockTransport};
use crate::transport::ssh::SshTransport;
use crate::transport::{DefaultTransports, RateLimiterConfig, ReconnectPolicy, Transport};

/// Exit code for usage errors, unreadable input and rejected documents.
pub const EXIT_USAGE: i32 = 1;

#[derive(Debug, Parser)]
#[command(name = "gplmt", version, about = "Run declarative experiments on testbed nodes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate, simulate or execute an experiment description.
    Run(RunArgs),
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Experiment description (XML).
    pub experiment: PathBuf,

    /// Simulate on a mock transport and virtual clock instead of executing.
    #[arg(long, conflicts_with = "validate")]
    pub dry_run: bool,

    /// Only parse and validate.
    #[arg(long)]
    pub validate: bool,

    /// Directory that receives one run directory per execution.
    #[arg(long, value_name = "PATH", default_value = "gplmt-runs")]
    pub log_dir: PathBuf,

    /// Limit connection attempts, e.g. `10/1s` or `10/PT1S`.
    #[arg(long, value_name = "N/DUR")]
    pub max_connects: Option<RateLimiterConfig>,

    /// Restrict execution to the nodes of these targets.
    #[arg(long, value_name = "TARGET[,TARGET...]", value_delimiter = ',')]
    pub only: Vec<String>,

    /// Export VAR=VALUE on every node, overriding the document.
    #[arg(long = "set", value_name = "VAR=VALUE", value_parser = parse_env_override)]
    pub set: Vec<EnvVar>,

    /// JSON script of command outcomes for --dry-run.
    #[arg(long, value_name = "PATH", requires = "dry_run")]
    pub mock_script: Option<PathBuf>,

    /// Keep PlanetLab nodes that are not in the boot state.
    #[arg(long)]
    pub include_unbooted: bool,

    /// ssh_config file passed to the SSH client.
    #[arg(long, value_name = "PATH")]
    pub ssh_config: Option<PathBuf>,
}

fn parse_env_override(s: &str) -> Result<EnvVar, String> {
    let (name, value) = s.split_once('=').ok_or("expected VAR=VALUE")?;
    let ident = !name.is_empty()
        && !name.starts_with(|c: char| c.is_ascii_digit())
        && name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_');
    if !ident {
        return Err(format!("'{name}' is not a valid variable name"));
    }
    Ok(EnvVar::new(name, value))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Validate,
    DryRun,
    Run,
}

#[derive(Debug, Clone)]
pub struct CliConfig {
    pub experiment_path: PathBuf,
    pub mode: Mode,
    pub log_dir: PathBuf,
    pub rate_limit: Option<RateLimiterConfig>,
    pub target_filter: Option<Vec<String>>,
    pub env_overrides: Vec<EnvVar>,
    pub mock_script: Option<PathBuf>,
    pub include_unbooted: bool,
    pub ssh_config: Option<PathBuf>,
}

impl From<RunArgs> for CliConfig {
    fn from(a: RunArgs) -> Self {
        let mode = if a.validate {
            Mode::Validate
        } else if a.dry_run {
            Mode::DryRun
        } else {
            Mode::Run
        };
        Self {
            experiment_path: a.experiment,
            mode,
            log_dir: a.log_dir,
            rate_limit: a.max_connects,
            target_filter: (!a.only.is_empty()).then_some(a.only),
            env_overrides: a.set,
            mock_script: a.mock_script,
            include_unbooted: a.include_unbooted,
            ssh_config: a.ssh_config,
        }
    }
}

/// Restricts `experiment` to the leaf nodes of `names`.
///
/// Every other leaf becomes an empty group of the same name, so steps on it
/// run vacuously.
pub fn filter_targets(experiment: &Experiment, names: &[String]) -> Result<Experiment, ModelError> {
    if names.is_empty() {
        return Ok(experiment.clone());
    }
    let mut keep = std::collections::HashSet::new();
    for name in names {
        for node in experiment.resolve_target(name)? {
            keep.insert(node.target.name);
        }
    }
    fn prune(t: &mut TargetDef, keep: &std::collections::HashSet<String>) {
        if t.is_leaf() {
            if !keep.contains(&t.name) {
                let env = std::mem::take(&mut t.env_exports);
                *t = TargetDef::group(&t.name, Vec::new());
                t.env_exports = env;
            }
            return;
        }
        for m in &mut t.members {
            if let GroupMember::Inline(inner) = m {
                prune(inner, keep);
            }
        }
    }
    let mut out = experiment.clone();
    for t in &mut out.targets {
        prune(t, &keep);
    }
    Ok(out)
}

/// Appends `overrides` to the exports of every leaf target.
pub fn apply_env_overrides(experiment: &mut Experiment, overrides: &[EnvVar]) {
    fn apply(t: &mut TargetDef, overrides: &[EnvVar]) {
        if t.is_leaf() {
            t.env_exports = merge_env(&t.env_exports, overrides);
        }
        for m in &mut t.members {
            if let GroupMember::Inline(inner) = m {
                apply(inner, overrides);
            }
        }
    }
    if overrides.is_empty() {
        return;
    }
    for t in &mut experiment.targets {
        apply(t, overrides);
    }
}

/// One timeline line for an event.
pub fn format_event(e: &ExecutionEvent) -> String {
    let mut line = format!("{:>4}.{:03}s  {:<14}", e.t_ms / 1000, e.t_ms % 1000, format!("{:?}", e.kind));
    let mut push = |s: String| {
        line.push(' ');
        line.push_str(&s);
    };
    if let Some(s) = e.step {
        push(format!("step={s}"));
    }
    if let Some(t) = e.teardown {
        push(format!("teardown={t}"));
    }
    if let Some(n) = &e.node {
        push(format!("node={n}"));
    }
    if let Some(t) = &e.tasklist {
        push(format!("tasklist={t}"));
    }
    if let Some(p) = &e.task_path {
        let p: Vec<String> = p.iter().map(usize::to_string).collect();
        push(format!("task={}", p.join(".")));
    }
    if let Some(o) = e.outcome {
        push(format!("outcome={o}"));
    }
    if let Some(c) = e.exit_code {
        push(format!("exit={c}"));
    }
    if let Some(nodes) = &e.nodes {
        let parts: Vec<String> = nodes.iter().map(|(n, o)| format!("{n}:{o:?}")).collect();
        push(format!("nodes=[{}]", parts.join(",")));
    }
    if let Some(f) = &e.fetched {
        push(format!("fetched={f}"));
    }
    if !e.detail.is_empty() {
        push(format!("-- {}", e.detail));
    }
    line
}

fn print_diagnostics(diags: &[Diagnostic], err: &mut dyn Write) {
    for d in diags {
        let _ = writeln!(err, "{d}");
    }
}

fn experiment_name(path: &Path) -> String {
    path.file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "experiment".into())
}

/// Parses `args` (program name first) and runs; returns the exit code.
pub fn main_with(args: impl IntoIterator<Item = String>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{}", e.render());
                return EXIT_USAGE;
            }
            let _ = write!(out, "{}", e.render());
            return 0;
        }
    };
    match cli.command {
        Command::Run(args) => execute(&CliConfig::from(args), out, err),
    }
}

pub fn execute(cfg: &CliConfig, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let validated = match load_experiment(&cfg.experiment_path) {
        Ok(v) => v,
        Err(diags) => {
            print_diagnostics(&diags, err);
            return EXIT_USAGE;
        }
    };
    print_diagnostics(&validated.warnings, err);
    if cfg.mode == Mode::Validate {
        let _ = writeln!(out, "{}: ok", cfg.experiment_path.display());
        return 0;
    }
    match prepare_and_run(cfg, validated.experiment, out) {
        Ok(code) => code,
        Err(message) => {
            let _ = writeln!(err, "error: {message}");
            EXIT_USAGE
        }
    }
}

fn prepare_and_run(cfg: &CliConfig, experiment: Experiment, out: &mut dyn Write) -> Result<i32, String> {
    let runtime = match cfg.mode {
        Mode::Run => Some(real_runtime().map_err(|e| e.to_string())?),
        _ => None,
    };
    let mut experiment = match &runtime {
        Some(rt) => {
            let secret = std::env::var(planetlab::SECRET_ENV).ok();
            rt.block_on(planetlab::expand_experiment(&experiment, secret.as_deref(), cfg.include_unbooted))
                .map_err(|e| e.to_string())?
        }
        None => experiment,
    };
    if let Some(names) = &cfg.target_filter {
        experiment = filter_targets(&experiment, names).map_err(|e| e.to_string())?;
    }
    apply_env_overrides(&mut experiment, &cfg.env_overrides);

    let started = Utc::now();
    let run_dir = RunDir::create(&cfg.log_dir, &experiment_name(&cfg.experiment_path), started)
        .map_err(|e| e.to_string())?;
    let put_base = cfg
        .experiment_path
        .parent()
        .map(Path::to_path_buf)
        .unwrap_or_default();
    let experiment = Arc::new(experiment);

    let report = match runtime {
        None => {
            let script = match &cfg.mock_script {
                Some(p) => {
                    let text = std::fs::read_to_string(p).map_err(|e| format!("{}: {e}", p.display()))?;
                    MockScript::from_json(&text).map_err(|e| format!("{}: {e}", p.display()))?
                }
                None => MockScript::default(),
            };
            let options = RunOptions {
                transport: Arc::new(MockTransport::new(script)),
                limiter: cfg.rate_limit,
                reconnect: ReconnectPolicy::default(),
                run_dir: run_dir.clone(),
                put_base,
            };
            let (report, events) = simulate(experiment, started, true, options).map_err(|e| e.to_string())?;
            for e in &events {
                let _ = writeln!(out, "{}", format_event(e));
            }
            report
        }
        Some(rt) => {
            let ssh = SshTransport::from_env(cfg.ssh_config.clone()).map_err(|e| e.to_string())?;
            let transport: Arc<dyn Transport> = Arc::new(DefaultTransports {
                local: LocalTransport::default(),
                ssh,
            });
            let options = RunOptions {
                transport,
                limiter: cfg.rate_limit,
                reconnect: ReconnectPolicy::default(),
                run_dir: run_dir.clone(),
                put_base,
            };
            rt.block_on(async {
                let clock = Clock::real();
                let sink = Arc::new(EventSink::to_file(clock.clone(), &run_dir.events_path())?);
                run_experiment(experiment, clock, sink, options).await
            })
            .map_err(|e| e.to_string())?
        }
    };
    let (_, summary) = render_report(&report.events);
    let _ = write!(out, "{summary}");
    let _ = writeln!(out, "run directory: {}", run_dir.path().display());
    if report.events.iter().any(|e| e.kind == EventKind::Panic) {
        let _ = writeln!(out, "experiment panicked; teardowns were executed");
    }
    Ok(report.overall.exit_code())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::parser::parse_experiment_str;

    fn exp(xml: &str) -> Experiment {
        parse_experiment_str(xml, Path::new("t.xml")).unwrap().experiment
    }

    const DOC: &str = r#"<experiment><targets>
        <target name="monitor" type="local"/>
        <target name="pingGroup" type="group">
          <target name="A" type="local"><export-env var="host" value="10.0.0.17"/></target>
          <target name="B" type="local"><export-env var="host" value="10.0.0.16"/></target>
        </target></targets><steps/></experiment>"#;

    fn names(e: &Experiment, target: &str) -> Vec<String> {
        e.resolve_target(target)
            .unwrap()
            .into_iter()
            .map(|n| n.target.name)
            .collect()
    }

    #[test]
    fn filter_keeps_only_named_nodes() {
        let e = exp(DOC);
        let f = filter_targets(&e, &["monitor".into()]).unwrap();
        assert_eq!(names(&f, "monitor"), ["monitor"]);
        assert!(names(&f, "pingGroup").is_empty());
        let f = filter_targets(&e, &["A".into(), "monitor".into()]).unwrap();
        assert_eq!(names(&f, "pingGroup"), ["A"]);
    }

    #[test]
    fn empty_filter_is_identity() {
        let e = exp(DOC);
        assert_eq!(filter_targets(&e, &[]).unwrap(), e);
    }

    #[test]
    fn unknown_filter_target() {
        assert_eq!(
            filter_targets(&exp(DOC), &["nope".into()]).unwrap_err(),
            ModelError::UnknownTarget("nope".into())
        );
    }

    #[test]
    fn overrides_win_over_document_values() {
        let mut e = exp(DOC);
        apply_env_overrides(&mut e, &[EnvVar::new("host", "1.2.3.4"), EnvVar::new("x", "y")]);
        let a = &e.resolve_target("A").unwrap()[0];
        assert_eq!(a.env, [EnvVar::new("host", "1.2.3.4"), EnvVar::new("x", "y")]);
    }

    #[test]
    fn env_override_syntax() {
        assert_eq!(parse_env_override("a_1=x=y").unwrap(), EnvVar::new("a_1", "x=y"));
        assert!(parse_env_override("1a=x").is_err());
        assert!(parse_env_override("novalue").is_err());
    }

    #[test]
    fn flags_map_to_config() {
        let cli = Cli::try_parse_from([
            "gplmt", "run", "x.xml", "--dry-run", "--max-connects", "10/1s", "--only", "a,b", "--set", "k=v",
        ])
        .unwrap();
        let Command::Run(args) = cli.command;
        let cfg = CliConfig::from(args);
        assert_eq!(cfg.mode, Mode::DryRun);
        assert_eq!(cfg.rate_limit.unwrap().to_string(), "10/1s");
        assert_eq!(cfg.target_filter.unwrap(), ["a", "b"]);
        assert_eq!(cfg.env_overrides, [EnvVar::new("k", "v")]);
    }

    #[test]
    fn usage_errors_exit_with_one() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let args = ["gplmt", "run", "x.xml", "--dry-run", "--validate"].map(String::from);
        assert_eq!(main_with(args, &mut out, &mut err), EXIT_USAGE);
        let args = ["gplmt", "run", "x.xml", "--max-connects", "ten"].map(String::from);
        assert_eq!(main_with(args, &mut out, &mut err), EXIT_USAGE);
    }

    #[test]
    fn missing_file_is_an_io_diagnostic() {
        let (mut out, mut err) = (Vec::new(), Vec::new());
        let args = ["gplmt", "run", "/nonexistent/nosuchfile.xml"].map(String::from);
        assert_eq!(main_with(args, &mut out, &mut err), EXIT_USAGE);
        assert!(String::from_utf8(err).unwrap().contains("IoError"));
    }
}
