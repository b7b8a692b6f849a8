//! Confidentiality suppression, the reasonability audit, and data retention.

use std::collections::BTreeMap;
use std::ops::AddAssign;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Duration, NaiveDate, Utc};
use serde::{Deserialize, Serialize};

use crate::harmonise::HarmonizedOdm;
use crate::ingest::{CanonicalFeed, ProviderProfile, Resolution, MINUTES_PER_DAY};
use crate::time::format_timestamp;

pub const DEFAULT_K_OUT: u32 = 20;
pub const DEFAULT_MAX_ZONES_PER_COUNTRY: usize = 5000;
pub const MIN_WINDOW_MINUTES: u32 = 15;

/// Field names that identify individual subscribers or devices.
pub const IDENTIFYING_FIELDS: [&str; 12] = [
    "imsi",
    "imei",
    "msisdn",
    "tmsi",
    "device_id",
    "user_id",
    "subscriber_id",
    "phone_number",
    "ip_address",
    "mac_address",
    "email",
    "customer_id",
];

#[derive(Debug, thiserror::Error)]
pub enum PrivacyError {
    #[error("output threshold {k_out} is weaker than provider threshold {strictest}")]
    WeakerThanProvider { k_out: u32, strictest: u32 },
    #[error("output threshold must be at least 1")]
    ZeroThreshold,
    #[error("store {path} is unavailable: {reason}")]
    StorageUnavailable { path: PathBuf, reason: String },
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    /// Remove the cell.
    #[default]
    Drop,
    /// Keep the key, replace the count with NaN (written as `masked`).
    Mask,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuppressionPolicy {
    pub k_out: u32,
    pub strategy: Strategy,
}

impl Default for SuppressionPolicy {
    fn default() -> Self {
        Self { k_out: DEFAULT_K_OUT, strategy: Strategy::Drop }
    }
}

impl SuppressionPolicy {
    pub fn new(k_out: u32, strategy: Strategy) -> Result<Self, PrivacyError> {
        if k_out == 0 {
            return Err(PrivacyError::ZeroThreshold);
        }
        Ok(Self { k_out, strategy })
    }

    /// Policy that may not be weaker than any input provider's threshold.
    pub fn for_providers(
        k_out: u32,
        strategy: Strategy,
        thresholds: impl IntoIterator<Item = u32>,
    ) -> Result<Self, PrivacyError> {
        let strictest = thresholds.into_iter().max().unwrap_or(1);
        if k_out < strictest {
            return Err(PrivacyError::WeakerThanProvider { k_out, strictest });
        }
        Self::new(k_out, strategy)
    }

    pub fn is_disclosive(&self, count: f64) -> bool {
        count > 0.0 && count < f64::from(self.k_out)
    }
}

/// Lost cells and mass, kept for audit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SuppressionStats {
    pub cells_in: u64,
    pub cells_suppressed: u64,
    pub count_suppressed: f64,
}

impl AddAssign for SuppressionStats {
    fn add_assign(&mut self, rhs: Self) {
        self.cells_in += rhs.cells_in;
        self.cells_suppressed += rhs.cells_suppressed;
        self.count_suppressed += rhs.count_suppressed;
    }
}

/// Drops (or masks) every cell with `0 < count < k_out`. Suppressed mass is
/// not redistributed.
pub fn suppress(odm: &HarmonizedOdm, policy: &SuppressionPolicy) -> (HarmonizedOdm, SuppressionStats) {
    let mut stats = SuppressionStats { cells_in: odm.cells.len() as u64, ..Default::default() };
    let mut out = HarmonizedOdm { cells: BTreeMap::new(), ..odm.clone() };
    for (key, &count) in &odm.cells {
        if policy.is_disclosive(count) {
            stats.cells_suppressed += 1;
            stats.count_suppressed += count;
            if policy.strategy == Strategy::Mask {
                out.cells.insert(key.clone(), f64::NAN);
            }
        } else {
            out.cells.insert(key.clone(), count);
        }
    }
    (out, stats)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub details: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReasonabilityReport {
    pub feed_id: String,
    /// The check set approximates an aggregate-data audit; it carries no
    /// quantitative re-identification bound.
    pub note: String,
    pub checks: Vec<CheckResult>,
    pub verdict: Verdict,
    pub generated_at: DateTime<Utc>,
}

impl ReasonabilityReport {
    pub fn passed(&self) -> bool {
        self.verdict == Verdict::Pass
    }

    pub fn check(&self, name: &str) -> Option<&CheckResult> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditConfig {
    pub max_zones_per_country: usize,
    pub min_window_minutes: u32,
}

impl Default for AuditConfig {
    fn default() -> Self {
        Self { max_zones_per_country: DEFAULT_MAX_ZONES_PER_COUNTRY, min_window_minutes: MIN_WINDOW_MINUTES }
    }
}

pub const CHECK_SCHEMA: &str = "schema_aggregate";
pub const CHECK_THRESHOLD: &str = "threshold";
pub const CHECK_GRANULARITY: &str = "granularity";
pub const CHECK_ATTRIBUTES: &str = "attribute_sparsity";

const MAX_LISTED: usize = 5;

fn identifying(name: &str) -> Option<&'static str> {
    let norm: String = name
        .to_ascii_lowercase()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() { c } else { '_' })
        .collect();
    IDENTIFYING_FIELDS
        .iter()
        .copied()
        .find(|f| norm.contains(f))
}

/// Audits a feed before any product is built from it.
pub fn reasonability_test(feed: &CanonicalFeed, profile: &ProviderProfile, config: &AuditConfig) -> ReasonabilityReport {
    let checks = vec![
        schema_check(feed, profile),
        threshold_check(feed, profile),
        granularity_check(feed, config),
        attribute_check(feed, profile),
    ];
    let verdict = if checks.iter().all(|c| c.passed) { Verdict::Pass } else { Verdict::Fail };
    ReasonabilityReport {
        feed_id: feed.meta.provider_id.clone(),
        note: "reconstructed check set: aggregate schema, provider threshold, granularity, attribute slices".into(),
        checks,
        verdict,
        generated_at: Utc::now(),
    }
}

fn schema_check(feed: &CanonicalFeed, profile: &ProviderProfile) -> CheckResult {
    let mut found: Vec<String> = profile
        .column_map
        .iter()
        .flat_map(|(k, v)| [k, v])
        .chain(feed.meta.source_columns.iter())
        .filter(|name| identifying(name).is_some())
        .cloned()
        .collect();
    found.sort();
    found.dedup();
    CheckResult {
        name: CHECK_SCHEMA.into(),
        passed: found.is_empty(),
        details: if found.is_empty() {
            "only aggregate fields present".into()
        } else {
            format!("individual-level fields present: {}", found.join(", "))
        },
    }
}

fn describe(c: &crate::ingest::OdmCell) -> String {
    let mut s = format!("{}->{} @ {} count {}", c.origin.code, c.destination.code, format_timestamp(c.window.start), c.count);
    if !c.attributes.is_empty() {
        s.push_str(&format!(" [{}]", c.attributes));
    }
    s
}

fn threshold_check(feed: &CanonicalFeed, profile: &ProviderProfile) -> CheckResult {
    let k = f64::from(profile.threshold_k);
    let below: Vec<_> = feed.cells.iter().filter(|c| c.count < k).collect();
    let min = feed.cells.iter().map(|c| c.count).fold(f64::INFINITY, f64::min);
    let details = if below.is_empty() {
        if feed.cells.is_empty() {
            "no cells".to_string()
        } else {
            format!("minimum count {min} >= {}", profile.threshold_k)
        }
    } else {
        let listed: Vec<String> = below.iter().take(MAX_LISTED).map(|c| describe(c)).collect();
        format!("{} cell(s) below {}: {}", below.len(), profile.threshold_k, listed.join("; "))
    };
    CheckResult { name: CHECK_THRESHOLD.into(), passed: below.is_empty(), details }
}

fn granularity_check(feed: &CanonicalFeed, config: &AuditConfig) -> CheckResult {
    let window = match feed.meta.resolution {
        Resolution::Window(m) => m,
        Resolution::Daily => MINUTES_PER_DAY,
        Resolution::Weekly => 7 * MINUTES_PER_DAY,
    };
    let reference = feed.meta.reference_level.is_some();
    let mut per_country: BTreeMap<String, usize> = BTreeMap::new();
    for z in feed.zones() {
        let country = if reference { z.chars().take(2).collect() } else { feed.meta.zoning.clone() };
        *per_country.entry(country).or_default() += 1;
    }
    let mut problems = Vec::new();
    if window < config.min_window_minutes {
        problems.push(format!("{window}-minute windows are finer than {}", config.min_window_minutes));
    }
    for (country, n) in &per_country {
        if *n > config.max_zones_per_country {
            problems.push(format!("{country}: {n} zones exceeds ceiling {}", config.max_zones_per_country));
        }
    }
    let zones = per_country.values().max().copied().unwrap_or(0);
    CheckResult {
        name: CHECK_GRANULARITY.into(),
        passed: problems.is_empty(),
        details: if problems.is_empty() {
            format!("{window}-minute windows, at most {zones} zones per country")
        } else {
            problems.join("; ")
        },
    }
}

fn attribute_check(feed: &CanonicalFeed, profile: &ProviderProfile) -> CheckResult {
    let k = f64::from(profile.threshold_k);
    let mut slices: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for c in feed.cells.iter().filter(|c| !c.attributes.is_empty()) {
        let e = slices.entry(c.attributes.to_string()).or_default();
        e.0 += 1;
        if c.count < k {
            e.1 += 1;
        }
    }
    let failing: Vec<String> =
        slices.iter().filter(|(_, (_, bad))| *bad > 0).map(|(s, (n, bad))| format!("{s}: {bad}/{n} cells below {}", profile.threshold_k)).collect();
    CheckResult {
        name: CHECK_ATTRIBUTES.into(),
        passed: failing.is_empty(),
        details: if slices.is_empty() {
            "no attribute-bearing cells".into()
        } else if failing.is_empty() {
            format!("{} attribute slice(s) all at or above {}", slices.len(), profile.threshold_k)
        } else {
            failing.join("; ")
        },
    }
}

/// First `YYYY-MM-DD` token in a file name.
pub fn data_date(name: &str) -> Option<NaiveDate> {
    let bytes = name.as_bytes();
    (0..bytes.len().saturating_sub(9)).find_map(|i| {
        let s = name.get(i..i + 10)?;
        let shaped = s.bytes().enumerate().all(|(j, b)| if j == 4 || j == 7 { b == b'-' } else { b.is_ascii_digit() });
        if shaped {
            NaiveDate::parse_from_str(s, "%Y-%m-%d").ok()
        } else {
            None
        }
    })
}

/// Deletes files whose data date (taken from the file name) is older than
/// `now - horizon_days`. Returns purged paths relative to `store_root`.
pub fn retention_sweep(store_root: &Path, horizon_days: u32, now: NaiveDate) -> Result<Vec<PathBuf>, PrivacyError> {
    let unavailable = |reason: String| PrivacyError::StorageUnavailable { path: store_root.into(), reason };
    if !store_root.is_dir() {
        return Err(unavailable("not a directory".into()));
    }
    let cutoff = now - Duration::days(i64::from(horizon_days));
    let mut purged = Vec::new();
    let mut stack = vec![store_root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        let entries = std::fs::read_dir(&dir).map_err(|e| unavailable(e.to_string()))?;
        for entry in entries {
            let entry = entry.map_err(|e| unavailable(e.to_string()))?;
            let path = entry.path();
            let kind = entry.file_type().map_err(|e| unavailable(e.to_string()))?;
            if kind.is_dir() {
                stack.push(path);
            } else if let Some(date) = data_date(&entry.file_name().to_string_lossy()) {
                if date < cutoff {
                    std::fs::remove_file(&path).map_err(|e| unavailable(e.to_string()))?;
                    purged.push(path.strip_prefix(store_root).unwrap_or(&path).to_path_buf());
                }
            }
        }
    }
    purged.sort();
    Ok(purged)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{canonicalize, Attribute, Attributes, OdmCell, StopTime, TimeWindow, ZoneId};
    use std::sync::Arc;

    fn odm(counts: &[f64]) -> HarmonizedOdm {
        let mut h = HarmonizedOdm::new(NaiveDate::from_ymd_opt(2020, 3, 2).unwrap(), "p", 3);
        for (i, c) in counts.iter().enumerate() {
            h.add(&format!("AA11{i}"), "AA111", *c);
        }
        h
    }

    fn counts(h: &HarmonizedOdm) -> Vec<f64> {
        h.cells.values().copied().collect()
    }

    #[test]
    fn drops_cells_below_k() {
        let (out, stats) = suppress(&odm(&[30.0, 19.0, 50.0]), &SuppressionPolicy::new(20, Strategy::Drop).unwrap());
        assert_eq!(counts(&out), vec![30.0, 50.0]);
        assert_eq!(stats.cells_suppressed, 1);
        assert_eq!(stats.count_suppressed, 19.0);
    }

    #[test]
    fn k_of_one_is_identity() {
        let input = odm(&[1.0, 2.5, 0.0, 300.0]);
        let (out, stats) = suppress(&input, &SuppressionPolicy::new(1, Strategy::Drop).unwrap());
        assert_eq!(out, input);
        assert_eq!(stats.cells_suppressed, 0);
    }

    #[test]
    fn everything_suppressed() {
        let (out, stats) = suppress(&odm(&[3.0, 4.0, 5.0]), &SuppressionPolicy::default());
        assert!(out.cells.is_empty());
        assert_eq!(stats.count_suppressed, 12.0);
        assert_eq!(stats.cells_suppressed, 3);
    }

    #[test]
    fn mask_keeps_keys() {
        let (out, _) = suppress(&odm(&[30.0, 19.0]), &SuppressionPolicy::new(20, Strategy::Mask).unwrap());
        assert_eq!(out.cells.len(), 2);
        assert_eq!(out.total(), 30.0);
        assert!(out.cells.values().any(|c| c.is_nan()));
    }

    #[test]
    fn policy_never_weaker_than_providers() {
        assert!(matches!(
            SuppressionPolicy::for_providers(20, Strategy::Drop, [10, 30]),
            Err(PrivacyError::WeakerThanProvider { k_out: 20, strictest: 30 })
        ));
        assert!(SuppressionPolicy::for_providers(30, Strategy::Drop, [10, 30]).is_ok());
        assert!(SuppressionPolicy::new(0, Strategy::Drop).is_err());
    }

    fn profile(k: u32) -> ProviderProfile {
        ProviderProfile {
            provider_id: "mno".into(),
            zoning_id: "grid".into(),
            window_minutes: 60,
            stop_time_minutes: StopTime::Minutes(30),
            extrapolated: true,
            market_share: None,
            threshold_k: k,
            column_map: Default::default(),
            crs_id: "x".into(),
        }
    }

    fn cell(o: &str, d: &str, hour: u32, count: f64) -> OdmCell {
        OdmCell {
            origin: ZoneId { scope: Arc::from("grid"), code: Arc::from(o) },
            destination: ZoneId { scope: Arc::from("grid"), code: Arc::from(d) },
            window: TimeWindow::new(NaiveDate::from_ymd_opt(2020, 3, 2).unwrap().and_hms_opt(hour, 0, 0).unwrap(), 60).unwrap(),
            count,
            attributes: Attributes::default(),
        }
    }

    #[test]
    fn compliant_feed_passes() {
        let p = profile(30);
        let feed = canonicalize(vec![cell("a", "b", 0, 30.0), cell("b", "a", 1, 90.0)], &p).unwrap();
        let report = reasonability_test(&feed, &p, &AuditConfig::default());
        assert!(report.passed(), "{}", report.to_json());
        assert_eq!(report.checks.len(), 4);
    }

    #[test]
    fn single_sub_threshold_cell_fails() {
        let p = profile(30);
        let feed = canonicalize(vec![cell("a", "b", 0, 30.0), cell("b", "c", 1, 29.0)], &p).unwrap();
        let report = reasonability_test(&feed, &p, &AuditConfig::default());
        assert_eq!(report.verdict, Verdict::Fail);
        let t = report.check(CHECK_THRESHOLD).unwrap();
        assert!(!t.passed);
        assert!(t.details.contains("b->c"), "{}", t.details);
        assert!(report.check(CHECK_SCHEMA).unwrap().passed);
    }

    #[test]
    fn identifying_column_fails_schema_check() {
        let mut p = profile(30);
        p.column_map.insert("imsi".into(), "imsi".into());
        let feed = canonicalize(vec![cell("a", "b", 0, 30.0)], &p).unwrap();
        let report = reasonability_test(&feed, &p, &AuditConfig::default());
        assert!(!report.check(CHECK_SCHEMA).unwrap().passed);
        assert_eq!(report.verdict, Verdict::Fail);
        assert!(identifying("Device-ID").is_some());
        assert!(identifying("origin").is_none());
        assert!(identifying("window_start").is_none());
    }

    #[test]
    fn granularity_and_attribute_slices() {
        let p = profile(10);
        let mut female = cell("a", "b", 0, 12.0);
        female.attributes.insert(Attribute::Sex, "f");
        let mut male = cell("a", "b", 0, 4.0);
        male.attributes.insert(Attribute::Sex, "m");
        let feed = canonicalize(vec![cell("a", "b", 0, 16.0), female, male], &p).unwrap();
        let report = reasonability_test(&feed, &p, &AuditConfig { max_zones_per_country: 1, ..Default::default() });
        let g = report.check(CHECK_GRANULARITY).unwrap();
        assert!(!g.passed && g.details.contains("2 zones"), "{}", g.details);
        let a = report.check(CHECK_ATTRIBUTES).unwrap();
        assert!(!a.passed && a.details.contains("sex=m"), "{}", a.details);
        // threshold check also sees the slice cell
        assert!(!report.check(CHECK_THRESHOLD).unwrap().passed);
    }

    #[test]
    fn verdict_is_deterministic() {
        let p = profile(30);
        let feed = canonicalize(vec![cell("a", "b", 0, 3.0), cell("b", "c", 1, 29.0)], &p).unwrap();
        let a = reasonability_test(&feed, &p, &AuditConfig::default());
        let b = reasonability_test(&feed, &p, &AuditConfig::default());
        assert_eq!((a.verdict, &a.checks), (b.verdict, &b.checks));
    }

    #[test]
    fn data_dates_from_names() {
        assert_eq!(data_date("2020-03-01.csv"), NaiveDate::from_ymd_opt(2020, 3, 1));
        assert_eq!(data_date("daily_2020-12-31_mfa.csv"), NaiveDate::from_ymd_opt(2020, 12, 31));
        assert_eq!(data_date("indicators.csv"), None);
        assert_eq!(data_date("2020-13-01.csv"), None);
    }

    #[test]
    fn sweep_purges_old_files_once() {
        let dir = tempfile::tempdir().unwrap();
        let now = NaiveDate::from_ymd_opt(2020, 6, 1).unwrap();
        let recent = now - Duration::days(10);
        let old = now - Duration::days(40);
        std::fs::create_dir_all(dir.path().join("harmonised/p1")).unwrap();
        std::fs::write(dir.path().join(format!("harmonised/p1/{recent}.csv")), "x").unwrap();
        std::fs::write(dir.path().join(format!("harmonised/p1/{old}.csv")), "x").unwrap();
        std::fs::write(dir.path().join("manifest.json"), "{}").unwrap();
        let purged = retention_sweep(dir.path(), 30, now).unwrap();
        assert_eq!(purged, vec![PathBuf::from(format!("harmonised/p1/{old}.csv"))]);
        assert!(dir.path().join(format!("harmonised/p1/{recent}.csv")).exists());
        assert!(retention_sweep(dir.path(), 30, now).unwrap().is_empty());
    }

    #[test]
    fn sweep_of_empty_or_missing_store() {
        let dir = tempfile::tempdir().unwrap();
        let now = NaiveDate::from_ymd_opt(2020, 6, 1).unwrap();
        assert!(retention_sweep(dir.path(), 30, now).unwrap().is_empty());
        assert!(matches!(
            retention_sweep(&dir.path().join("nope"), 30, now),
            Err(PrivacyError::StorageUnavailable { .. })
        ));
    }
}
