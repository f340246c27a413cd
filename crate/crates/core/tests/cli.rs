mod support;

use std::path::{Path, PathBuf};
use std::process::Command;

use gplmt::telemetry::{EventKind, ExecutionEvent};
use support::{cli, fixture};

fn run_dir_of(stdout: &str) -> PathBuf {
    let line = stdout
        .lines()
        .find_map(|l| l.strip_prefix("run directory: "))
        .expect("run directory line");
    PathBuf::from(line)
}

fn events_in(run_dir: &Path) -> Vec<ExecutionEvent> {
    std::fs::read_to_string(run_dir.join("events.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn listing1_dry_run_timeline() {
    let logs = tempfile::tempdir().unwrap();
    let (code, out, err) = cli(&["run", s(&fixture("listing1.xml")), "--dry-run", "--log-dir", s(logs.path())]);
    assert_eq!(code, 0, "{err}");
    let lines: Vec<&str> = out.lines().collect();
    let release = lines.iter().position(|l| l.contains("BarrierRelease")).unwrap();
    let ping = lines
        .iter()
        .position(|l| l.contains("TaskStart") && l.contains("tasklist=doPing"))
        .unwrap();
    assert!(release < ping);
    let run = run_dir_of(&out);
    for f in ["events.jsonl", "report.json", "report.txt"] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(run.join("monitor/testrun.pcap").is_file());
}

#[test]
fn missing_document() {
    let (code, _, err) = cli(&["run", "nosuchfile.xml", "--validate"]);
    assert_eq!(code, 1);
    assert!(err.contains("error[IoError]"), "{err}");
}

#[test]
fn invalid_document_exits_with_one() {
    let (code, _, err) = cli(&["run", s(&fixture("invalid/call_cycle.xml")), "--dry-run"]);
    assert_eq!(code, 1);
    assert!(err.contains("error[CallCycle]"), "{err}");
}

#[test]
fn exit_codes_follow_the_overall_outcome() {
    let logs = tempfile::tempdir().unwrap();
    for (doc, expected) in [("abort_step", 2), ("panic", 3), ("barrier", 0)] {
        let path = fixture(&format!("{doc}.xml"));
        let script = fixture(&format!("{doc}.mock.json"));
        let (code, _, err) = cli(&[
            "run",
            s(&path),
            "--dry-run",
            "--mock-script",
            s(&script),
            "--log-dir",
            s(logs.path()),
        ]);
        assert_eq!(code, expected, "{doc}: {err}");
    }
}

#[test]
fn target_filter_makes_other_steps_vacuous() {
    let logs = tempfile::tempdir().unwrap();
    let (code, out, _) = cli(&[
        "run",
        s(&fixture("listing1.xml")),
        "--dry-run",
        "--only",
        "monitor",
        "--log-dir",
        s(logs.path()),
    ]);
    assert_eq!(code, 0);
    let events = events_in(&run_dir_of(&out));
    let started: Vec<_> = events
        .iter()
        .filter(|e| e.kind == EventKind::TaskStart)
        .map(|e| e.tasklist.clone().unwrap())
        .collect();
    assert_eq!(started, ["createPCAP", "getData", "stopMonitoring"]);
    let warning = events.iter().find(|e| e.kind == EventKind::Warning).unwrap();
    assert_eq!(warning.step, Some(1));
    let (code, _, err) = cli(&["run", s(&fixture("listing1.xml")), "--dry-run", "--only", "C"]);
    assert_eq!(code, 1);
    assert!(err.contains("unknown target 'C'"), "{err}");
}

fn fanout_doc(dir: &Path, nodes: usize) -> PathBuf {
    let targets: String = (0..nodes)
        .map(|i| format!(r#"<target name="n{i:03}" type="local"/>"#))
        .collect();
    let xml = format!(
        r#"<experiment><targets><target name="all" type="group">{targets}</target></targets>
        <tasklists><tasklist name="t"><run>hostname</run></tasklist></tasklists>
        <steps><step tasklist="t" targets="all"/></steps></experiment>"#
    );
    let path = dir.join("fanout.xml");
    std::fs::write(&path, xml).unwrap();
    path
}

#[test]
fn max_connects_limits_every_window() {
    let dir = tempfile::tempdir().unwrap();
    let doc = fanout_doc(dir.path(), 30);
    let (code, out, _) = cli(&[
        "run",
        s(&doc),
        "--dry-run",
        "--max-connects",
        "10/1s",
        "--log-dir",
        s(&dir.path().join("logs")),
    ]);
    assert_eq!(code, 0);
    let times: Vec<u64> = events_in(&run_dir_of(&out))
        .iter()
        .filter(|e| e.kind == EventKind::ConnectAttempt)
        .map(|e| e.t_ms)
        .collect();
    assert_eq!(times.len(), 30);
    for &t in &times {
        assert!(times.iter().filter(|&&u| u >= t && u < t + 1000).count() <= 10);
    }
}

/// A stand-in ssh client that only leaves a trace.
fn spy_client(dir: &Path) -> (PathBuf, PathBuf) {
    use std::os::unix::fs::PermissionsExt;
    let marker = dir.join("ssh-was-called");
    let client = dir.join("spy-ssh");
    std::fs::write(&client, format!("#!/bin/sh\ntouch '{}'\nexit 255\n", marker.display())).unwrap();
    std::fs::set_permissions(&client, std::fs::Permissions::from_mode(0o755)).unwrap();
    (client, marker)
}

#[test]
fn dry_run_never_touches_the_network() {
    let dir = tempfile::tempdir().unwrap();
    let (client, marker) = spy_client(dir.path());
    let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    listener.set_nonblocking(true).unwrap();
    let doc = dir.path().join("pl.xml");
    std::fs::write(
        &doc,
        format!(
            r#"<experiment><include file="{}"/>
            <targets><target name="slice" type="planetlab" api-url="http://{}/PLCAPI/" slice="s" user="u"/>
            <target name="remote" type="ssh"><user>u</user><host>192.0.2.1</host></target></targets>
            <tasklists><tasklist name="t"><run>uname -a</run><get>log.txt</get></tasklist></tasklists>
            <steps><step tasklist="t" targets="slice"/><step tasklist="t" targets="remote"/>
            <register-teardown ref="stopMonitoring" targets="remote"/></steps></experiment>"#,
            fixture("include/teardowns.xml").display(),
            listener.local_addr().unwrap()
        ),
    )
    .unwrap();
    let status = Command::new(env!("CARGO_BIN_EXE_gplmt"))
        .args(["run", s(&doc), "--dry-run", "--log-dir", s(&dir.path().join("logs"))])
        .env("GPLMT_SSH_CLIENT", &client)
        .env("GPLMT_PLANETLAB_SECRET", "x")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(0), "{}", String::from_utf8_lossy(&status.stderr));
    assert!(!marker.exists());
    assert!(listener.accept().is_err());

    // the same document really executed does reach out
    listener.set_nonblocking(false).unwrap();
    let accepted = std::thread::spawn(move || listener.accept().is_ok());
    let status = Command::new(env!("CARGO_BIN_EXE_gplmt"))
        .args(["run", s(&doc), "--log-dir", s(&dir.path().join("logs"))])
        .env("GPLMT_SSH_CLIENT", &client)
        .env("GPLMT_PLANETLAB_SECRET", "x")
        .output()
        .unwrap();
    assert_eq!(status.status.code(), Some(1));
    assert!(accepted.join().unwrap());
}

#[test]
fn real_run_on_the_controller() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("input.txt"), "hello\n").unwrap();
    let doc = dir.path().join("local.xml");
    std::fs::write(
        &doc,
        r#"<experiment>
          <targets><target name="here" type="local"><export-env var="GREETING" value="hi there"/></target></targets>
          <tasklists>
            <tasklist name="work">
              <run>echo "$GREETING"</run>
              <run>mkdir -p remote &amp;&amp; cp input.txt remote/copy.txt</run>
              <get>remote/copy.txt</get>
            </tasklist>
            <tasklist name="bad" timeout="PT1S"><run>sleep 30</run></tasklist>
          </tasklists>
          <steps><step tasklist="work" targets="here"/><synchronize/><step tasklist="bad" targets="here"/></steps>
        </experiment>"#,
    )
    .unwrap();
    let started = std::time::Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_gplmt"))
        .current_dir(dir.path())
        .args(["run", "local.xml", "--log-dir", "logs"])
        .output()
        .unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert_eq!(out.status.code(), Some(2), "{stdout}{}", String::from_utf8_lossy(&out.stderr));
    assert!(started.elapsed() < std::time::Duration::from_secs(10));
    let run = dir.path().join(run_dir_of(&stdout));
    assert_eq!(std::fs::read_to_string(run.join("here/copy.txt")).unwrap(), "hello\n");
    assert_eq!(std::fs::read_to_string(run.join("here/stdout-s0-work-0.log")).unwrap(), "hi there\n");
    let events = events_in(&run);
    let timed_out = events
        .iter()
        .find(|e| e.kind == EventKind::TaskEnd && e.tasklist.as_deref() == Some("bad"))
        .unwrap();
    assert_eq!(timed_out.outcome, Some(gplmt::model::TaskOutcome::TimedOut));
}
