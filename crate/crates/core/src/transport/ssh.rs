//! SSH through an external client program, reusing one multiplexed master
//! connection per node.

use std::borrow::Cow;
use std::path::{Path, PathBuf};
use std::process::Stdio;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use tokio::io::AsyncReadExt;
use tokio::process::Command;

use super::local::{exit_code, output_sink, wait_deadline, KILL_GRACE};
use super::{Connection, ExecEnd, ExecRequest, Transport, TransportError};
use crate::model::{EnvVar, TargetDef};
use crate::scheduler::Clock;

/// Environment variable naming the client executable.
pub const CLIENT_ENV: &str = "GPLMT_SSH_CLIENT";

/// Exit status the client uses for its own failures.
const CLIENT_ERROR: i32 = 255;
const MISSING_FILE: i32 = 66;

static SEQ: AtomicU64 = AtomicU64::new(0);

fn quote(s: &str) -> Cow<'_, str> {
    shlex::try_quote(s).unwrap_or_else(|_| Cow::Owned(format!("'{}'", s.replace('\0', ""))))
}

#[derive(Debug)]
pub struct SshTransport {
    client: PathBuf,
    config: Option<PathBuf>,
    control_dir: PathBuf,
    pub grace: Duration,
}

impl SshTransport {
    /// Uses `client` as the executable and `config` as its `-F` file.
    pub fn new(client: impl Into<PathBuf>, config: Option<PathBuf>) -> std::io::Result<Self> {
        let control_dir = std::env::temp_dir().join(format!(
            "gplmt-{}-{}",
            std::process::id(),
            SEQ.fetch_add(1, Ordering::SeqCst)
        ));
        std::fs::create_dir_all(&control_dir)?;
        Ok(Self {
            client: client.into(),
            config,
            control_dir,
            grace: KILL_GRACE,
        })
    }

    /// Client from `GPLMT_SSH_CLIENT`, defaulting to `ssh`.
    pub fn from_env(config: Option<PathBuf>) -> std::io::Result<Self> {
        let client = std::env::var_os(CLIENT_ENV).unwrap_or_else(|| "ssh".into());
        Self::new(PathBuf::from(client), config)
    }
}

impl Drop for SshTransport {
    fn drop(&mut self) {
        let _ = std::fs::remove_dir_all(&self.control_dir);
    }
}

#[async_trait]
impl Transport for SshTransport {
    async fn connect(&self, target: &TargetDef, clock: &Clock) -> Result<Arc<dyn Connection>, TransportError> {
        if target.ssh_password.is_some() {
            return Err(TransportError::AuthUnsupported(format!(
                "password authentication is not supported for '{}'; configure key-based authentication in the client configuration",
                target.name
            )));
        }
        let host = target.ssh_host.as_deref().unwrap_or(&target.name);
        let destination = match target.ssh_user.as_deref() {
            Some(user) => format!("{user}@{host}"),
            None => host.to_string(),
        };
        let conn = SshConnection {
            node: target.name.clone(),
            client: self.client.clone(),
            config: self.config.clone(),
            control_path: self
                .control_dir
                .join(SEQ.fetch_add(1, Ordering::SeqCst).to_string()),
            destination,
            grace: self.grace,
            clock: clock.clone(),
            alive: AtomicBool::new(true),
        };
        let output = conn
            .command()
            .args(["-o", "ControlMaster=yes", "-o", "ControlPersist=yes", "-f", "-N"])
            .arg(&conn.destination)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .output()
            .await
            .map_err(|e| TransportError::ConnectFailed {
                node: target.name.clone(),
                reason: format!("cannot run {}: {e}", self.client.display()),
            })?;
        if !output.status.success() {
            return Err(TransportError::ConnectFailed {
                node: target.name.clone(),
                reason: String::from_utf8_lossy(&output.stderr).trim().to_string(),
            });
        }
        Ok(Arc::new(conn))
    }
}

struct SshConnection {
    node: String,
    client: PathBuf,
    config: Option<PathBuf>,
    control_path: PathBuf,
    destination: String,
    grace: Duration,
    clock: Clock,
    alive: AtomicBool,
}

/// Shell text run on the node: records the process group, exports the
/// environment and runs the command in a child shell.
fn remote_script(command: &str, env: &[EnvVar], pid_file: &str) -> String {
    let mut script = format!("echo $$ > {pid_file}; ");
    for var in env {
        script.push_str(&format!("export {}={}; ", var.name, quote(&var.value)));
    }
    script.push_str(&format!(
        "sh -c {}; rc=$?; rm -f {pid_file}; exit $rc",
        quote(command)
    ));
    script
}

impl SshConnection {
    fn command(&self) -> Command {
        let mut cmd = Command::new(&self.client);
        if let Some(cfg) = &self.config {
            cmd.arg("-F").arg(cfg);
        }
        cmd.arg("-o")
            .arg(format!("ControlPath={}", self.control_path.display()))
            .args(["-o", "BatchMode=yes"]);
        cmd
    }

    /// Client invocation running `script` through the master connection.
    fn remote(&self, script: &str) -> Command {
        let mut cmd = self.command();
        cmd.args(["-o", "ControlMaster=no"])
            .arg(&self.destination)
            .arg(script)
            .kill_on_drop(true);
        cmd
    }

    fn lost(&self) -> TransportError {
        self.alive.store(false, Ordering::SeqCst);
        TransportError::ConnectionLost(self.node.clone())
    }

    async fn signal_remote(&self, pid_file: &str, signal: &str) {
        let script = format!("test -f {pid_file} && kill -{signal} -$(cat {pid_file}) 2>/dev/null; true");
        let _ = self
            .remote(&script)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .await;
    }
}

#[async_trait]
impl Connection for SshConnection {
    async fn exec(&self, req: &ExecRequest<'_>) -> Result<ExecEnd, TransportError> {
        let pid_file = format!(
            ".gplmt-pgid-{}-{}",
            std::process::id(),
            SEQ.fetch_add(1, Ordering::SeqCst)
        );
        let mut child = self
            .remote(&remote_script(req.command, req.env, &pid_file))
            .process_group(0)
            .stdin(Stdio::null())
            .stdout(output_sink(req.stdout)?)
            .stderr(output_sink(req.stderr)?)
            .spawn()?;
        let end = tokio::select! {
            biased;
            status = child.wait() => {
                return Ok(match exit_code(status?) {
                    CLIENT_ERROR => {
                        self.lost();
                        ExecEnd::ConnectionLost
                    }
                    code => ExecEnd::Exited(code),
                });
            }
            _ = wait_deadline(req.clock, req.deadline) => ExecEnd::TimedOut,
            _ = req.cancel.cancelled() => ExecEnd::Aborted,
        };
        self.signal_remote(&pid_file, "TERM").await;
        tokio::select! {
            _ = child.wait() => {}
            _ = self.clock.sleep(self.grace) => {
                self.signal_remote(&pid_file, "KILL").await;
                let _ = child.kill().await;
            }
        }
        Ok(end)
    }

    async fn fetch(&self, remote: &str, dest: &Path) -> Result<(), TransportError> {
        let path = quote(remote);
        let script = format!("test -f {path} || exit {MISSING_FILE}; cat -- {path}");
        let mut partial = dest.as_os_str().to_owned();
        partial.push(".partial");
        let partial = PathBuf::from(partial);
        let status = self
            .remote(&script)
            .stdin(Stdio::null())
            .stdout(Stdio::from(std::fs::File::create(&partial)?))
            .stderr(Stdio::null())
            .status()
            .await?;
        match exit_code(status) {
            0 => Ok(std::fs::rename(&partial, dest)?),
            code => {
                let _ = std::fs::remove_file(&partial);
                Err(match code {
                    MISSING_FILE => TransportError::RemoteFileMissing(remote.to_string()),
                    CLIENT_ERROR => self.lost(),
                    other => TransportError::Io(format!("fetching {remote} exited with {other}")),
                })
            }
        }
    }

    async fn push(&self, local: &Path, remote: &str) -> Result<(), TransportError> {
        let file = std::fs::File::open(local).map_err(|_| TransportError::LocalFileMissing(local.to_path_buf()))?;
        let path = quote(remote);
        let partial = quote(&format!("{remote}.gplmt-partial")).into_owned();
        let script = format!("cat > {partial} && mv -f -- {partial} {path}");
        let mut child = self
            .remote(&script)
            .stdin(Stdio::from(file))
            .stdout(Stdio::null())
            .stderr(Stdio::piped())
            .spawn()?;
        let mut stderr = String::new();
        if let Some(mut pipe) = child.stderr.take() {
            let _ = pipe.read_to_string(&mut stderr).await;
        }
        match exit_code(child.wait().await?) {
            0 => Ok(()),
            CLIENT_ERROR => Err(self.lost()),
            other => Err(TransportError::Io(format!(
                "pushing {remote} exited with {other}: {}",
                stderr.trim()
            ))),
        }
    }

    fn is_alive(&self) -> bool {
        self.alive.load(Ordering::SeqCst)
    }

    async fn close(&self) {
        let _ = self
            .command()
            .args(["-O", "exit"])
            .arg(&self.destination)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .status()
            .await;
        self.alive.store(false, Ordering::SeqCst);
    }
}
