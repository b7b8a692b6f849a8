//! Feed ingestion: provider profiles, ODM CSV parsing and canonical feeds.
//!
//! Every provider delivers its origin-destination matrix in its own CSV
//! layout, zoning, and time resolution. This module reads a feed according to
//! the provider's declared [`ProviderProfile`] and produces a
//! [`CanonicalFeed`]: merged duplicate keys, UTC timestamps, and a
//! deterministic row order.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{NaiveDate, NaiveDateTime, Timelike};
use serde::{Deserialize, Serialize};

use crate::time::{format_timestamp, parse_timestamp};

/// Provider window lengths (minutes) accepted in a profile.
pub const PROVIDER_WINDOWS: [u32; 8] = [15, 30, 60, 120, 240, 480, 720, 1440];

pub const MINUTES_PER_DAY: u32 = 1440;

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("profile is not valid TOML: {0}")]
    ProfileSyntax(String),
    #[error("missing required field `{0}`")]
    MissingField(String),
    #[error("field `{field}` = {value} is out of range ({expected})")]
    InvalidRange { field: String, value: String, expected: String },
    #[error("unknown zoning `{0}`")]
    UnknownZoning(String),
    #[error("feed has no column `{0}` required by the column map")]
    MissingColumn(String),
    #[error("malformed row at line {line}: {reason}")]
    MalformedRow { line: u64, reason: String },
    #[error("negative count at line {line}")]
    NegativeCount { line: u64 },
    #[error("window start {start} at line {line} is not aligned to {minutes}-minute windows")]
    WindowMisaligned { line: u64, start: String, minutes: u32 },
    #[error("count {count} at line {line} is below the provider threshold {threshold}")]
    ThresholdViolation { line: u64, count: f64, threshold: u32 },
    #[error("cells from more than one zoning: expected `{expected}`, found `{found}`")]
    MixedProviders { expected: String, found: String },
    #[error("zone code must not be empty")]
    EmptyZoneCode,
}

pub type Result<T, E = IngestError> = std::result::Result<T, E>;

/// A zone in some zoning system (a provider grid, postcodes, NUTS, ...).
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ZoneId {
    pub scope: Arc<str>,
    pub code: Arc<str>,
}

impl ZoneId {
    pub fn new(scope: impl Into<Arc<str>>, code: impl Into<Arc<str>>) -> Result<Self> {
        let code = code.into();
        if code.is_empty() {
            return Err(IngestError::EmptyZoneCode);
        }
        Ok(Self { scope: scope.into(), code })
    }
}

impl fmt::Display for ZoneId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.scope, self.code)
    }
}

/// Hands out shared string handles so a feed stores each zone code once.
#[derive(Default)]
pub struct Interner(HashSet<Arc<str>>);

impl Interner {
    pub fn get(&mut self, s: &str) -> Arc<str> {
        if let Some(a) = self.0.get(s) {
            return a.clone();
        }
        let a: Arc<str> = Arc::from(s);
        self.0.insert(a.clone());
        a
    }
}

/// Aggregation window of a cell. `start` is UTC; `minutes` may exceed a day
/// for weekly sub-bins produced by [`crate::harmonise::rebin_time`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TimeWindow {
    pub start: NaiveDateTime,
    pub minutes: u32,
}

impl TimeWindow {
    /// Builds a window, checking that `start` is aligned to `minutes` measured
    /// from midnight UTC (multi-day windows must start at midnight).
    pub fn new(start: NaiveDateTime, minutes: u32) -> Option<Self> {
        if minutes == 0 || start.second() != 0 || start.nanosecond() != 0 {
            return None;
        }
        let since_midnight = start.hour() * 60 + start.minute();
        let aligned = if minutes <= MINUTES_PER_DAY {
            since_midnight.is_multiple_of(minutes)
        } else {
            since_midnight == 0
        };
        aligned.then_some(Self { start, minutes })
    }

    pub fn day(&self) -> NaiveDate {
        self.start.date()
    }

    pub fn daily(day: NaiveDate) -> Self {
        Self { start: day.and_hms_opt(0, 0, 0).expect("midnight exists"), minutes: MINUTES_PER_DAY }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Attribute {
    AgeBand,
    Sex,
    Roamer,
}

impl Attribute {
    pub const ALL: [Attribute; 3] = [Attribute::AgeBand, Attribute::Sex, Attribute::Roamer];

    pub fn column(self) -> &'static str {
        match self {
            Attribute::AgeBand => "age_band",
            Attribute::Sex => "sex",
            Attribute::Roamer => "roamer",
        }
    }
}

/// Optional demographic / roaming breakdown of a cell. Empty for the
/// undisaggregated population.
#[derive(Clone, Debug, Default, PartialEq, Eq, Hash, PartialOrd, Ord)]
// one word per cell: nearly all cells carry no attributes
#[allow(clippy::box_collection)]
pub struct Attributes(Option<Box<BTreeMap<Attribute, String>>>);

impl Attributes {
    pub fn is_empty(&self) -> bool {
        self.0.is_none()
    }

    pub fn get(&self, a: Attribute) -> Option<&str> {
        self.0.as_ref()?.get(&a).map(String::as_str)
    }

    pub fn insert(&mut self, a: Attribute, value: impl Into<String>) {
        self.0.get_or_insert_with(Default::default).insert(a, value.into());
    }

    pub fn iter(&self) -> impl Iterator<Item = (Attribute, &str)> {
        self.0.iter().flat_map(|m| m.iter().map(|(k, v)| (*k, v.as_str())))
    }
}

impl fmt::Display for Attributes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.iter().map(|(k, v)| format!("{}={v}", k.column())).collect();
        f.write_str(&parts.join(","))
    }
}

/// One aggregated movement count between two zones in one window.
#[derive(Clone, Debug, PartialEq)]
pub struct OdmCell {
    pub origin: ZoneId,
    pub destination: ZoneId,
    pub window: TimeWindow,
    pub count: f64,
    pub attributes: Attributes,
}

impl OdmCell {
    fn sort_key(&self) -> (NaiveDateTime, &str, &str, u32, &Attributes) {
        (self.window.start, &self.origin.code, &self.destination.code, self.window.minutes, &self.attributes)
    }
}

/// How a provider registers the destination of a movement.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StopTime {
    Minutes(u32),
    /// Destination is the zone where most of a long window was spent.
    TimeWindowMajority,
}

const MAJORITY: &str = "time-window-majority";

impl Serialize for StopTime {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            StopTime::Minutes(m) => s.serialize_u32(*m),
            StopTime::TimeWindowMajority => s.serialize_str(MAJORITY),
        }
    }
}

impl<'de> Deserialize<'de> for StopTime {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Minutes(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Minutes(m) => Ok(StopTime::Minutes(m)),
            Raw::Text(s) if s == MAJORITY => Ok(StopTime::TimeWindowMajority),
            Raw::Text(s) => Err(serde::de::Error::custom(format!("unknown stop time {s:?}"))),
        }
    }
}

impl fmt::Display for StopTime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            StopTime::Minutes(m) => write!(f, "{m}min"),
            StopTime::TimeWindowMajority => f.write_str(MAJORITY),
        }
    }
}

/// Canonical field names understood by the reader.
pub const CANONICAL_COLUMNS: [&str; 7] =
    ["origin", "destination", "window_start", "count", "age_band", "sex", "roamer"];

/// Declarative description of one provider feed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProviderProfile {
    pub provider_id: String,
    pub zoning_id: String,
    pub window_minutes: u32,
    pub stop_time_minutes: StopTime,
    pub extrapolated: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market_share: Option<f64>,
    pub threshold_k: u32,
    /// Canonical field name -> CSV header name. Missing canonical fields map
    /// to a header of the same name.
    #[serde(default)]
    pub column_map: BTreeMap<String, String>,
    pub crs_id: String,
}

#[derive(Deserialize)]
struct RawProfile {
    provider_id: Option<String>,
    zoning_id: Option<String>,
    window_minutes: Option<i64>,
    stop_time_minutes: Option<toml::Value>,
    extrapolated: Option<bool>,
    market_share: Option<f64>,
    threshold_k: Option<i64>,
    #[serde(default)]
    column_map: BTreeMap<String, String>,
    crs_id: Option<String>,
}

fn required<T>(v: Option<T>, name: &str) -> Result<T> {
    v.ok_or_else(|| IngestError::MissingField(name.to_string()))
}

fn out_of_range(field: &str, value: impl fmt::Display, expected: &str) -> IngestError {
    IngestError::InvalidRange { field: field.into(), value: value.to_string(), expected: expected.into() }
}

impl ProviderProfile {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let raw: RawProfile = toml::from_str(text).map_err(|e| IngestError::ProfileSyntax(e.to_string()))?;
        let window_minutes = required(raw.window_minutes, "window_minutes")?;
        let stop_time = match required(raw.stop_time_minutes, "stop_time_minutes")? {
            toml::Value::Integer(m) => StopTime::Minutes(
                u32::try_from(m).map_err(|_| out_of_range("stop_time_minutes", m, "15..=60"))?,
            ),
            toml::Value::String(s) if s == MAJORITY => StopTime::TimeWindowMajority,
            other => return Err(out_of_range("stop_time_minutes", other, "15..=60 or \"time-window-majority\"")),
        };
        let threshold_k = required(raw.threshold_k, "threshold_k")?;
        let profile = ProviderProfile {
            provider_id: required(raw.provider_id, "provider_id")?,
            zoning_id: required(raw.zoning_id, "zoning_id")?,
            window_minutes: u32::try_from(window_minutes)
                .map_err(|_| out_of_range("window_minutes", window_minutes, "positive"))?,
            stop_time_minutes: stop_time,
            extrapolated: required(raw.extrapolated, "extrapolated")?,
            market_share: raw.market_share,
            threshold_k: u32::try_from(threshold_k).map_err(|_| out_of_range("threshold_k", threshold_k, ">= 1"))?,
            column_map: raw.column_map,
            crs_id: required(raw.crs_id, "crs_id")?,
        };
        profile.validate()?;
        Ok(profile)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("profile serialises")
    }

    /// Checks every profile invariant. 15- and 30-minute windows are accepted
    /// with a warning.
    pub fn validate(&self) -> Result<()> {
        if self.provider_id.is_empty() {
            return Err(IngestError::MissingField("provider_id".into()));
        }
        if self.zoning_id.is_empty() {
            return Err(IngestError::UnknownZoning(String::new()));
        }
        if !PROVIDER_WINDOWS.contains(&self.window_minutes) {
            return Err(out_of_range("window_minutes", self.window_minutes, "one of 15,30,60,120,240,480,720,1440"));
        }
        if self.window_minutes < 60 {
            log::warn!(
                "provider {}: {}-minute windows are finer than the one-hour minimum seen in practice",
                self.provider_id,
                self.window_minutes
            );
        }
        if let StopTime::Minutes(m) = self.stop_time_minutes {
            if !(15..=60).contains(&m) {
                return Err(out_of_range("stop_time_minutes", m, "15..=60"));
            }
        }
        match self.market_share {
            None if !self.extrapolated => return Err(IngestError::MissingField("market_share".into())),
            Some(s) if !(s > 0.0 && s <= 1.0) => return Err(out_of_range("market_share", s, "(0, 1]")),
            _ => {}
        }
        if self.threshold_k < 1 {
            return Err(out_of_range("threshold_k", self.threshold_k, ">= 1"));
        }
        Ok(())
    }

    /// Fails with `UnknownZoning` unless the profile's zoning is one of `known`.
    pub fn check_zoning<'a>(&self, mut known: impl Iterator<Item = &'a str>) -> Result<()> {
        if known.any(|z| z == self.zoning_id) {
            Ok(())
        } else {
            Err(IngestError::UnknownZoning(self.zoning_id.clone()))
        }
    }

    /// CSV header used for a canonical field.
    pub fn column<'a>(&'a self, field: &'a str) -> &'a str {
        self.column_map.get(field).map(String::as_str).unwrap_or(field)
    }
}

pub fn load_profile(path: impl AsRef<Path>) -> Result<ProviderProfile> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| IngestError::Io { path: path.into(), source })?;
    ProviderProfile::from_toml_str(&text)
}

/// Whether sub-threshold rows are rejected while parsing.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// Providers must have suppressed every cell below their threshold.
    #[default]
    Strict,
    /// Keep sub-threshold rows (synthetic or pre-suppression data).
    Permissive,
}

/// Parsed rows plus the header of the source file.
pub struct ParsedOdm {
    pub columns: Vec<String>,
    pub cells: Vec<OdmCell>,
}

pub fn parse_odm(path: impl AsRef<Path>, profile: &ProviderProfile, mode: ThresholdMode) -> Result<Vec<OdmCell>> {
    Ok(read_odm_file(path.as_ref(), profile, mode)?.cells)
}

fn read_odm_file(path: &Path, profile: &ProviderProfile, mode: ThresholdMode) -> Result<ParsedOdm> {
    let file = std::fs::File::open(path).map_err(|source| IngestError::Io { path: path.into(), source })?;
    read_odm(std::io::BufReader::new(file), profile, mode)
}

/// Reads an ODM CSV from any reader. Row order is preserved.
pub fn read_odm<R: Read>(reader: R, profile: &ProviderProfile, mode: ThresholdMode) -> Result<ParsedOdm> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();
    let columns: Vec<String> = headers.iter().map(str::to_string).collect();
    if columns.is_empty() || (columns.len() == 1 && columns[0].is_empty()) {
        return Ok(ParsedOdm { columns: Vec::new(), cells: Vec::new() });
    }
    let find = |field: &str| headers.iter().position(|h| h == profile.column(field));
    let need = |field: &str| find(field).ok_or_else(|| IngestError::MissingColumn(profile.column(field).to_string()));
    let origin_i = need("origin")?;
    let dest_i = need("destination")?;
    let start_i = need("window_start")?;
    let count_i = need("count")?;
    let attr_cols: Vec<(Attribute, usize)> =
        Attribute::ALL.iter().filter_map(|a| find(a.column()).map(|i| (*a, i))).collect();

    let scope: Arc<str> = Arc::from(profile.zoning_id.as_str());
    let mut interner = Interner::default();
    let mut cells = Vec::new();
    let mut record = csv::StringRecord::new();
    while rdr.read_record(&mut record)? {
        let line = record.position().map(|p| p.line()).unwrap_or(0);
        let field = |i: usize| {
            record.get(i).ok_or_else(|| IngestError::MalformedRow { line, reason: format!("missing field {}", i + 1) })
        };
        let origin = field(origin_i)?;
        let destination = field(dest_i)?;
        if origin.is_empty() || destination.is_empty() {
            return Err(IngestError::MalformedRow { line, reason: "empty zone code".into() });
        }
        let start = parse_timestamp(field(start_i)?)
            .map_err(|e| IngestError::MalformedRow { line, reason: e.to_string() })?;
        let raw_count = field(count_i)?;
        let count: f64 = raw_count
            .parse()
            .ok()
            .filter(|c: &f64| c.is_finite())
            .ok_or_else(|| IngestError::MalformedRow { line, reason: format!("count {raw_count:?} is not a number") })?;
        if count < 0.0 {
            return Err(IngestError::NegativeCount { line });
        }
        let window = TimeWindow::new(start, profile.window_minutes).ok_or_else(|| IngestError::WindowMisaligned {
            line,
            start: format_timestamp(start),
            minutes: profile.window_minutes,
        })?;
        if mode == ThresholdMode::Strict && count < f64::from(profile.threshold_k) {
            return Err(IngestError::ThresholdViolation { line, count, threshold: profile.threshold_k });
        }
        let mut attributes = Attributes::default();
        for (a, i) in &attr_cols {
            let v = field(*i)?;
            if !v.is_empty() {
                attributes.insert(*a, v);
            }
        }
        cells.push(OdmCell {
            origin: ZoneId { scope: scope.clone(), code: interner.get(origin) },
            destination: ZoneId { scope: scope.clone(), code: interner.get(destination) },
            window,
            count,
            attributes,
        });
    }
    Ok(ParsedOdm { columns, cells })
}

/// Temporal resolution of a feed.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Resolution {
    /// Provider windows of the given length in minutes.
    Window(u32),
    Daily,
    /// ISO weeks split into weekday and weekend sub-bins.
    Weekly,
}

/// Feed-level metadata carried alongside the cells.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeedMeta {
    pub provider_id: String,
    /// Zoning of every cell (the provider zoning, or `NUTS<level>` after mapping).
    pub zoning: String,
    /// Reference level once mapped onto reference zones.
    pub reference_level: Option<u8>,
    pub resolution: Resolution,
    pub extrapolated: bool,
    pub market_share: Option<f64>,
    pub threshold_k: u32,
    pub stop_time: StopTime,
    /// Header of the source file, if read from one.
    pub source_columns: Vec<String>,
}

impl FeedMeta {
    pub fn from_profile(profile: &ProviderProfile) -> Self {
        Self {
            provider_id: profile.provider_id.clone(),
            zoning: profile.zoning_id.clone(),
            reference_level: None,
            resolution: Resolution::Window(profile.window_minutes),
            extrapolated: profile.extrapolated,
            market_share: profile.market_share,
            threshold_k: profile.threshold_k,
            stop_time: profile.stop_time_minutes,
            source_columns: Vec::new(),
        }
    }
}

/// Merged, sorted cells of one provider. Immutable once built.
#[derive(Clone, Debug, PartialEq)]
pub struct CanonicalFeed {
    pub meta: FeedMeta,
    pub cells: Vec<OdmCell>,
}

impl CanonicalFeed {
    pub fn total(&self) -> f64 {
        self.cells.iter().map(|c| c.count).sum()
    }

    pub fn days(&self) -> Vec<NaiveDate> {
        let mut days: Vec<NaiveDate> = self.cells.iter().map(|c| c.window.day()).collect();
        days.sort_unstable();
        days.dedup();
        days
    }

    /// Distinct zone codes appearing as origin or destination, sorted.
    pub fn zones(&self) -> Vec<Arc<str>> {
        let mut z: Vec<Arc<str>> =
            self.cells.iter().flat_map(|c| [c.origin.code.clone(), c.destination.code.clone()]).collect();
        z.sort_unstable();
        z.dedup();
        z
    }
}

/// Merges duplicate (origin, destination, window, attributes) keys by summing
/// and orders cells by (window start, origin code, destination code).
pub fn canonicalize(cells: Vec<OdmCell>, profile: &ProviderProfile) -> Result<CanonicalFeed> {
    for c in &cells {
        for z in [&c.origin, &c.destination] {
            if *z.scope != *profile.zoning_id {
                return Err(IngestError::MixedProviders {
                    expected: profile.zoning_id.clone(),
                    found: z.scope.to_string(),
                });
            }
        }
    }
    Ok(CanonicalFeed { meta: FeedMeta::from_profile(profile), cells: merge_sorted(cells) })
}

/// Re-canonicalises an existing feed (used after transformations).
pub fn recanonicalize(feed: CanonicalFeed) -> CanonicalFeed {
    CanonicalFeed { meta: feed.meta, cells: merge_sorted(feed.cells) }
}

pub(crate) fn merge_sorted(mut cells: Vec<OdmCell>) -> Vec<OdmCell> {
    cells.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
    let mut out: Vec<OdmCell> = Vec::with_capacity(cells.len());
    for c in cells {
        match out.last_mut() {
            Some(last)
                if last.window == c.window
                    && last.origin == c.origin
                    && last.destination == c.destination
                    && last.attributes == c.attributes =>
            {
                last.count += c.count
            }
            _ => out.push(c),
        }
    }
    out
}

/// Reads, parses and canonicalises one provider file.
pub fn load_feed(path: impl AsRef<Path>, profile: &ProviderProfile, mode: ThresholdMode) -> Result<CanonicalFeed> {
    let parsed = read_odm_file(path.as_ref(), profile, mode)?;
    let mut feed = canonicalize(parsed.cells, profile)?;
    feed.meta.source_columns = parsed.columns;
    Ok(feed)
}

/// Writes a feed in the ingest CSV layout with canonical column names.
/// Attribute columns are emitted only when some cell carries them.
pub fn write_feed<W: Write>(feed: &CanonicalFeed, writer: W) -> Result<()> {
    let attrs: Vec<Attribute> =
        Attribute::ALL.into_iter().filter(|a| feed.cells.iter().any(|c| c.attributes.get(*a).is_some())).collect();
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["origin", "destination", "window_start", "count"];
    header.extend(attrs.iter().map(|a| a.column()));
    w.write_record(&header)?;
    for c in &feed.cells {
        let mut row =
            vec![c.origin.code.to_string(), c.destination.code.to_string(), format_timestamp(c.window.start), c.count.to_string()];
        row.extend(attrs.iter().map(|a| c.attributes.get(*a).unwrap_or("").to_string()));
        w.write_record(&row)?;
    }
    w.flush().map_err(|source| IngestError::Io { path: PathBuf::from("<writer>"), source })?;
    Ok(())
}
