use std::io;
use std::time::Duration;

use chrono::{DateTime, Utc};
use tokio::runtime::{Builder, Runtime};
use tokio::time::Instant;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClockMode {
    Real,
    Virtual,
}

/// Experiment clock. Instants are offsets from the moment the clock was created,
/// which is the start of the experiment.
///
/// The virtual variant relies on a tokio runtime with paused time: the clock
/// only moves when every task is blocked, and then jumps straight to the next
/// pending timer. Build such a runtime with [`virtual_runtime`] and create the
/// clock from inside it.
#[derive(Debug, Clone)]
pub struct Clock {
    origin: Instant,
    wall_origin: DateTime<Utc>,
    mode: ClockMode,
}

impl Clock {
    pub fn real() -> Self {
        Self {
            origin: Instant::now(),
            wall_origin: Utc::now(),
            mode: ClockMode::Real,
        }
    }

    /// Virtual clock whose wall time starts at `wall_start`. Must be called
    /// within a runtime built by [`virtual_runtime`].
    pub fn virtual_at(wall_start: DateTime<Utc>) -> Self {
        Self {
            origin: Instant::now(),
            wall_origin: wall_start,
            mode: ClockMode::Virtual,
        }
    }

    pub fn mode(&self) -> ClockMode {
        self.mode
    }

    pub fn now(&self) -> Duration {
        Instant::now().saturating_duration_since(self.origin)
    }

    pub fn wall_start(&self) -> DateTime<Utc> {
        self.wall_origin
    }

    pub fn wall_now(&self) -> DateTime<Utc> {
        self.wall_origin + chrono::Duration::from_std(self.now()).unwrap_or(chrono::Duration::MAX)
    }

    /// Experiment offset of a wall-clock instant; instants before the start
    /// map to zero.
    pub fn offset_of(&self, wall: DateTime<Utc>) -> Duration {
        (wall - self.wall_origin).to_std().unwrap_or(Duration::ZERO)
    }

    pub async fn sleep_until(&self, at: Duration) {
        tokio::time::sleep_until(self.origin + at).await
    }

    pub async fn sleep(&self, d: Duration) {
        tokio::time::sleep(d).await
    }
}

/// Single-threaded runtime with paused time, for deterministic runs.
pub fn virtual_runtime() -> io::Result<Runtime> {
    Builder::new_current_thread()
        .enable_all()
        .start_paused(true)
        .build()
}

pub fn real_runtime() -> io::Result<Runtime> {
    Builder::new_multi_thread().enable_all().build()
}
