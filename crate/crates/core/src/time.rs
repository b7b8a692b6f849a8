//! Calendar helpers shared by the pipeline stages.
//!
//! All dates are UTC calendar days. Weekends are Saturday and Sunday.

use std::fmt;
use std::str::FromStr;

use chrono::{Datelike, Duration, NaiveDate, NaiveDateTime, Weekday};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TimeError {
    #[error("invalid timestamp {0:?}; expected ISO-8601 such as 2020-03-01T00:00")]
    BadTimestamp(String),
    #[error("invalid date {0:?}; expected YYYY-MM-DD")]
    BadDate(String),
    #[error("invalid date range {0:?}; expected START:END")]
    BadRange(String),
    #[error("invalid ISO week {0:?}; expected YYYY-Www")]
    BadWeek(String),
}

/// Weekday (Mon-Fri) versus weekend (Sat-Sun).
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DayClass {
    Weekday,
    Weekend,
}

impl DayClass {
    pub fn of(date: NaiveDate) -> Self {
        match date.weekday() {
            Weekday::Sat | Weekday::Sun => DayClass::Weekend,
            _ => DayClass::Weekday,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            DayClass::Weekday => "weekday",
            DayClass::Weekend => "weekend",
        }
    }
}

impl fmt::Display for DayClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DayClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "weekday" => Ok(DayClass::Weekday),
            "weekend" => Ok(DayClass::Weekend),
            other => Err(format!("unknown day class {other:?}")),
        }
    }
}

/// Inclusive range of calendar days.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct DateRange {
    pub start: NaiveDate,
    pub end: NaiveDate,
}

impl DateRange {
    pub fn new(start: NaiveDate, end: NaiveDate) -> Self {
        Self { start, end }
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        self.start <= date && date <= self.end
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> {
        let end = self.end;
        self.start.iter_days().take_while(move |d| *d <= end)
    }
}

impl fmt::Display for DateRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.start, self.end)
    }
}

impl FromStr for DateRange {
    type Err = TimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (a, b) = s.split_once(':').ok_or_else(|| TimeError::BadRange(s.to_string()))?;
        let start = parse_date(a).map_err(|_| TimeError::BadRange(s.to_string()))?;
        let end = parse_date(b).map_err(|_| TimeError::BadRange(s.to_string()))?;
        if end < start {
            return Err(TimeError::BadRange(s.to_string()));
        }
        Ok(Self { start, end })
    }
}

/// ISO-8601 week identifier, rendered as `2020-W09`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct WeekId {
    pub year: i32,
    pub week: u32,
}

impl WeekId {
    pub fn of(date: NaiveDate) -> Self {
        let iso = date.iso_week();
        Self { year: iso.year(), week: iso.week() }
    }

    pub fn monday(&self) -> NaiveDate {
        NaiveDate::from_isoywd_opt(self.year, self.week, Weekday::Mon)
            .expect("WeekId is only constructed for valid ISO weeks")
    }

    pub fn days(&self) -> impl Iterator<Item = NaiveDate> {
        self.monday().iter_days().take(7)
    }

    pub fn contains(&self, date: NaiveDate) -> bool {
        WeekId::of(date) == *self
    }
}

impl fmt::Display for WeekId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-W{:02}", self.year, self.week)
    }
}

impl FromStr for WeekId {
    type Err = TimeError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || TimeError::BadWeek(s.to_string());
        let (y, w) = s.split_once("-W").ok_or_else(bad)?;
        let year: i32 = y.parse().map_err(|_| bad())?;
        let week: u32 = w.parse().map_err(|_| bad())?;
        NaiveDate::from_isoywd_opt(year, week, Weekday::Mon).ok_or_else(bad)?;
        Ok(Self { year, week })
    }
}

impl Serialize for WeekId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for WeekId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

pub fn parse_date(s: &str) -> Result<NaiveDate, TimeError> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|_| TimeError::BadDate(s.to_string()))
}

/// Parses an ISO-8601 timestamp at minute precision and normalises it to UTC.
///
/// Accepts `YYYY-MM-DDTHH:MM`, an optional `:SS`, a space instead of `T`, and
/// either a `Z` suffix or a numeric offset.
pub fn parse_timestamp(s: &str) -> Result<NaiveDateTime, TimeError> {
    let t = s.trim();
    if let Ok(dt) = chrono::DateTime::parse_from_rfc3339(t) {
        return Ok(dt.naive_utc());
    }
    for fmt in ["%Y-%m-%dT%H:%M%:z", "%Y-%m-%d %H:%M%:z"] {
        if let Ok(dt) = chrono::DateTime::parse_from_str(t, fmt) {
            return Ok(dt.naive_utc());
        }
    }
    let t = t.strip_suffix('Z').unwrap_or(t);
    for fmt in ["%Y-%m-%dT%H:%M", "%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M", "%Y-%m-%d %H:%M:%S"] {
        if let Ok(dt) = NaiveDateTime::parse_from_str(t, fmt) {
            return Ok(dt);
        }
    }
    if let Ok(d) = NaiveDate::parse_from_str(t, "%Y-%m-%d") {
        return Ok(d.and_hms_opt(0, 0, 0).expect("midnight exists"));
    }
    Err(TimeError::BadTimestamp(s.to_string()))
}

pub fn format_timestamp(t: NaiveDateTime) -> String {
    t.format("%Y-%m-%dT%H:%M").to_string()
}

/// Earliest `weeks` complete ISO weeks (Mon..Sun all present) among `dates`.
pub fn earliest_full_weeks(dates: &[NaiveDate], weeks: usize) -> Option<DateRange> {
    let present: std::collections::BTreeSet<NaiveDate> = dates.iter().copied().collect();
    let first = *present.iter().next()?;
    let last = *present.iter().next_back()?;
    let mut monday = first - Duration::days(first.weekday().num_days_from_monday() as i64);
    if monday < first {
        monday += Duration::days(7);
    }
    let mut start = None;
    let mut found = 0;
    while monday + Duration::days(6) <= last {
        let full = (0..7).all(|i| present.contains(&(monday + Duration::days(i))));
        if full {
            start.get_or_insert(monday);
            found += 1;
            if found == weeks {
                return Some(DateRange::new(start.unwrap(), monday + Duration::days(6)));
            }
        } else if start.is_some() {
            // only consecutive full weeks form a baseline
            start = None;
            found = 0;
        }
        monday += Duration::days(7);
    }
    None
}
