//! Rate limiting of connection establishment.

use std::collections::VecDeque;
use std::fmt;
use std::str::FromStr;
use std::sync::Mutex;
use std::time::Duration;

use crate::scheduler::Clock;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RateLimiterConfig {
    pub max_attempts: u32,
    pub interval: Duration,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid rate limit '{0}': expected N/DURATION with N > 0 and a positive duration, e.g. 10/1s")]
pub struct RateLimitParseError(String);

impl RateLimiterConfig {
    pub fn new(max_attempts: u32, interval: Duration) -> Option<Self> {
        (max_attempts > 0 && !interval.is_zero()).then_some(Self {
            max_attempts,
            interval,
        })
    }
}

impl FromStr for RateLimiterConfig {
    type Err = RateLimitParseError;

    /// Parses `N/DURATION`, where the duration is either a human-readable
    /// span (`1s`, `500ms`) or an ISO-8601 duration (`PT1S`).
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let err = || RateLimitParseError(s.to_string());
        let (n, dur) = s.split_once('/').ok_or_else(err)?;
        let n: u32 = n.trim().parse().map_err(|_| err())?;
        let dur = dur.trim();
        let interval = humantime::parse_duration(dur)
            .ok()
            .or_else(|| crate::parser::parse_duration(dur).ok())
            .ok_or_else(err)?;
        Self::new(n, interval).ok_or_else(err)
    }
}

impl fmt::Display for RateLimiterConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.max_attempts, humantime::format_duration(self.interval))
    }
}

/// Admits at most `max_attempts` establishment attempts in any half-open
/// window of length `interval`.
///
/// Each permit is a reservation: the k-th attempt is placed no earlier than
/// `interval` after the (k - max_attempts)-th one. Reservations are handed
/// out in call order, so the schedule is deterministic on a virtual clock.
#[derive(Debug)]
pub struct RateLimiter {
    config: Option<RateLimiterConfig>,
    recent: Mutex<VecDeque<Duration>>,
}

impl RateLimiter {
    pub fn unlimited() -> Self {
        Self {
            config: None,
            recent: Mutex::new(VecDeque::new()),
        }
    }

    pub fn new(config: Option<RateLimiterConfig>) -> Self {
        Self {
            config,
            recent: Mutex::new(VecDeque::new()),
        }
    }

    pub fn config(&self) -> Option<RateLimiterConfig> {
        self.config
    }

    /// Reserves the earliest admissible instant at or after `now`.
    pub fn reserve(&self, now: Duration) -> Duration {
        let Some(cfg) = self.config else {
            return now;
        };
        let mut recent = self.recent.lock().unwrap();
        let slot = if recent.len() < cfg.max_attempts as usize {
            now
        } else {
            now.max(recent[0] + cfg.interval)
        };
        recent.push_back(slot);
        if recent.len() > cfg.max_attempts as usize {
            recent.pop_front();
        }
        slot
    }

    /// Waits for a permit and returns the instant it was granted.
    pub async fn acquire(&self, clock: &Clock) -> Duration {
        let slot = self.reserve(clock.now());
        clock.sleep_until(slot).await;
        slot
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn secs(v: &[u64]) -> Vec<Duration> {
        v.iter().map(|s| Duration::from_secs(*s)).collect()
    }

    #[test]
    fn two_per_second_schedule() {
        let limiter = RateLimiter::new(RateLimiterConfig::new(2, Duration::from_secs(1)));
        let slots: Vec<_> = (0..5).map(|_| limiter.reserve(Duration::ZERO)).collect();
        assert_eq!(slots, secs(&[0, 0, 1, 1, 2]));
    }

    #[test]
    fn unlimited_never_delays() {
        let limiter = RateLimiter::unlimited();
        for _ in 0..100 {
            assert_eq!(limiter.reserve(Duration::from_secs(7)), Duration::from_secs(7));
        }
    }

    #[test]
    fn late_arrivals_are_not_delayed() {
        let limiter = RateLimiter::new(RateLimiterConfig::new(2, Duration::from_secs(1)));
        limiter.reserve(Duration::ZERO);
        limiter.reserve(Duration::ZERO);
        assert_eq!(limiter.reserve(Duration::from_secs(5)), Duration::from_secs(5));
        assert_eq!(limiter.reserve(Duration::from_secs(5)), Duration::from_secs(5));
        assert_eq!(limiter.reserve(Duration::from_secs(5)), Duration::from_secs(6));
    }

    #[test]
    fn parses_flag_syntax() {
        let c: RateLimiterConfig = "10/1s".parse().unwrap();
        assert_eq!(c, RateLimiterConfig::new(10, Duration::from_secs(1)).unwrap());
        let c: RateLimiterConfig = "3/PT2S".parse().unwrap();
        assert_eq!(c.interval, Duration::from_secs(2));
        assert!("0/1s".parse::<RateLimiterConfig>().is_err());
        assert!("5/0s".parse::<RateLimiterConfig>().is_err());
        assert!("5".parse::<RateLimiterConfig>().is_err());
        assert!("x/1s".parse::<RateLimiterConfig>().is_err());
    }
}
