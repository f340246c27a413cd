use std::time::Duration;

use chrono::{DateTime, Utc};

use crate::model::TimeSpec;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("'{0}' is neither an ISO-8601 duration (e.g. PT30S) nor an RFC-3339 timestamp")]
pub struct BadTimeSpec(pub String);

/// Parses an ISO-8601 duration such as `PT30S`, `PT1M30S` or `P1DT2H`.
///
/// Year and month components are rejected because their length depends on
/// the calendar.
pub fn parse_duration(text: &str) -> Result<Duration, BadTimeSpec> {
    let bad = || BadTimeSpec(text.to_string());
    let bytes = text.trim().as_bytes();
    if bytes.last() == Some(&b'T') {
        return Err(bad());
    }
    match iso8601::parsers::parse_duration(bytes) {
        Ok((&[], parsed)) => {
            if let iso8601::Duration::YMDHMS { year, month, .. } = parsed {
                if year != 0 || month != 0 {
                    return Err(bad());
                }
            }
            Ok(parsed.into())
        }
        _ => Err(bad()),
    }
}

pub fn parse_timestamp(text: &str) -> Result<DateTime<Utc>, BadTimeSpec> {
    DateTime::parse_from_rfc3339(text.trim())
        .map(|t| t.with_timezone(&Utc))
        .map_err(|_| BadTimeSpec(text.to_string()))
}

/// Durations are offsets from the experiment start; timestamps are absolute.
pub fn parse_timespec(text: &str) -> Result<TimeSpec, BadTimeSpec> {
    let trimmed = text.trim();
    if trimmed.starts_with('P') {
        parse_duration(trimmed).map(TimeSpec::Relative)
    } else {
        parse_timestamp(trimmed).map(TimeSpec::Absolute)
    }
}
