//! Runs tasks as processes on the controller itself.

use std::path::{Path, PathBuf};
use std::process::{ExitStatus, Stdio};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use tokio::process::{Child, Command};

use super::{Connection, ExecEnd, ExecRequest, Transport, TransportError};
use crate::model::TargetDef;
use crate::scheduler::Clock;

/// Time between the terminate and the kill signal.
pub const KILL_GRACE: Duration = Duration::from_secs(5);

#[derive(Debug, Clone)]
pub struct LocalTransport {
    /// Directory commands run in and relative file paths resolve against;
    /// the controller's working directory when unset.
    pub workdir: Option<PathBuf>,
    pub grace: Duration,
}

impl Default for LocalTransport {
    fn default() -> Self {
        Self {
            workdir: None,
            grace: KILL_GRACE,
        }
    }
}

impl LocalTransport {
    pub fn in_dir(workdir: impl Into<PathBuf>) -> Self {
        Self {
            workdir: Some(workdir.into()),
            ..Self::default()
        }
    }
}

#[async_trait]
impl Transport for LocalTransport {
    async fn connect(&self, _target: &TargetDef, _clock: &Clock) -> Result<Arc<dyn Connection>, TransportError> {
        Ok(Arc::new(LocalConnection {
            workdir: self.workdir.clone(),
            grace: self.grace,
        }))
    }
}

struct LocalConnection {
    workdir: Option<PathBuf>,
    grace: Duration,
}

pub(crate) fn output_sink(path: Option<&Path>) -> Result<Stdio, TransportError> {
    Ok(match path {
        Some(p) => Stdio::from(std::fs::File::create(p)?),
        None => Stdio::null(),
    })
}

pub(crate) fn exit_code(status: ExitStatus) -> i32 {
    use std::os::unix::process::ExitStatusExt;
    status
        .code()
        .or_else(|| status.signal().map(|s| 128 + s))
        .unwrap_or(-1)
}

pub(crate) async fn wait_deadline(clock: &Clock, deadline: Option<Duration>) {
    match deadline {
        Some(d) => clock.sleep_until(d).await,
        None => std::future::pending().await,
    }
}

fn signal_group(pgid: u32, signal: i32) {
    // SAFETY: killpg only sends a signal; a stale group id yields ESRCH.
    unsafe {
        libc::killpg(pgid as libc::pid_t, signal);
    }
}

/// Terminates the child's process group, escalating to SIGKILL after `grace`.
async fn terminate(child: &mut Child, pgid: Option<u32>, grace: Duration, clock: &Clock) {
    if let Some(pgid) = pgid {
        signal_group(pgid, libc::SIGTERM);
        tokio::select! {
            _ = child.wait() => return,
            _ = clock.sleep(grace) => {}
        }
        signal_group(pgid, libc::SIGKILL);
    }
    let _ = child.kill().await;
}

async fn copy_atomically(src: &Path, dest: &Path) -> std::io::Result<()> {
    let mut partial = dest.as_os_str().to_owned();
    partial.push(".partial");
    let partial = PathBuf::from(partial);
    tokio::fs::copy(src, &partial).await?;
    tokio::fs::rename(&partial, dest).await
}

impl LocalConnection {
    fn resolve(&self, path: &str) -> PathBuf {
        match &self.workdir {
            Some(dir) => dir.join(path),
            None => PathBuf::from(path),
        }
    }
}

#[async_trait]
impl Connection for LocalConnection {
    async fn exec(&self, req: &ExecRequest<'_>) -> Result<ExecEnd, TransportError> {
        let mut cmd = Command::new("sh");
        cmd.arg("-c")
            .arg(req.command)
            .process_group(0)
            .stdin(Stdio::null())
            .stdout(output_sink(req.stdout)?)
            .stderr(output_sink(req.stderr)?)
            .kill_on_drop(true);
        for var in req.env {
            cmd.env(&var.name, &var.value);
        }
        if let Some(dir) = &self.workdir {
            cmd.current_dir(dir);
        }
        let mut child = cmd.spawn()?;
        let pgid = child.id();
        let end = tokio::select! {
            biased;
            status = child.wait() => return Ok(ExecEnd::Exited(exit_code(status?))),
            _ = wait_deadline(req.clock, req.deadline) => ExecEnd::TimedOut,
            _ = req.cancel.cancelled() => ExecEnd::Aborted,
        };
        terminate(&mut child, pgid, self.grace, req.clock).await;
        Ok(end)
    }

    async fn fetch(&self, remote: &str, dest: &Path) -> Result<(), TransportError> {
        let src = self.resolve(remote);
        if !src.is_file() {
            return Err(TransportError::RemoteFileMissing(remote.to_string()));
        }
        Ok(copy_atomically(&src, dest).await?)
    }

    async fn push(&self, local: &Path, remote: &str) -> Result<(), TransportError> {
        if !local.is_file() {
            return Err(TransportError::LocalFileMissing(local.to_path_buf()));
        }
        Ok(copy_atomically(local, &self.resolve(remote)).await?)
    }

    fn is_alive(&self) -> bool {
        true
    }

    async fn close(&self) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::EnvVar;
    use tokio_util::sync::CancellationToken;

    async fn exec(
        conn: &dyn Connection,
        clock: &Clock,
        command: &str,
        env: &[EnvVar],
        deadline: Option<Duration>,
        out: Option<&Path>,
    ) -> ExecEnd {
        let cancel = CancellationToken::new();
        conn.exec(&ExecRequest {
            command,
            env,
            deadline,
            cancel: &cancel,
            clock,
            stdout: out,
            stderr: None,
        })
        .await
        .unwrap()
    }

    #[tokio::test]
    async fn true_and_false() {
        let clock = Clock::real();
        let conn = LocalTransport::default()
            .connect(&TargetDef::local("l"), &clock)
            .await
            .unwrap();
        assert_eq!(exec(conn.as_ref(), &clock, "true", &[], None, None).await, ExecEnd::Exited(0));
        assert_eq!(exec(conn.as_ref(), &clock, "exit 3", &[], None, None).await, ExecEnd::Exited(3));
    }

    #[tokio::test]
    async fn shell_expands_exported_variables() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Clock::real();
        let conn = LocalTransport::in_dir(dir.path())
            .connect(&TargetDef::local("l"), &clock)
            .await
            .unwrap();
        let out = dir.path().join("out.log");
        let env = [EnvVar::new("host", "10.0.0.17")];
        let end = exec(conn.as_ref(), &clock, "echo ping $host", &env, None, Some(&out)).await;
        assert_eq!(end, ExecEnd::Exited(0));
        assert_eq!(std::fs::read_to_string(&out).unwrap(), "ping 10.0.0.17\n");
    }

    #[tokio::test]
    async fn deadline_kills_the_process_group() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Clock::real();
        let conn = LocalTransport::in_dir(dir.path())
            .connect(&TargetDef::local("l"), &clock)
            .await
            .unwrap();
        let started = std::time::Instant::now();
        let deadline = Some(clock.now() + Duration::from_millis(200));
        // the background child must die with its group
        let end = exec(conn.as_ref(), &clock, "sleep 30 & sleep 30; touch survived", &[], deadline, None).await;
        assert_eq!(end, ExecEnd::TimedOut);
        assert!(started.elapsed() < Duration::from_secs(5));
        tokio::time::sleep(Duration::from_millis(100)).await;
        assert!(!dir.path().join("survived").exists());
    }

    #[tokio::test]
    async fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let clock = Clock::real();
        let conn = LocalTransport::in_dir(dir.path())
            .connect(&TargetDef::local("l"), &clock)
            .await
            .unwrap();
        let src = dir.path().join("src.bin");
        std::fs::write(&src, b"payload").unwrap();
        conn.push(&src, "remote.bin").await.unwrap();
        let dest = dir.path().join("back.bin");
        conn.fetch("remote.bin", &dest).await.unwrap();
        assert_eq!(std::fs::read(dest).unwrap(), b"payload");
        assert_eq!(
            conn.fetch("missing", &dir.path().join("x")).await,
            Err(TransportError::RemoteFileMissing("missing".into()))
        );
        assert!(matches!(
            conn.push(&dir.path().join("nope"), "r").await,
            Err(TransportError::LocalFileMissing(_))
        ));
    }
}
