//! End-to-end runs: ingest, reasonability audit, harmonisation, output
//! suppression, products and MFAs, with a reproducible manifest.
//!
//! Every stage writes plain files under the run's output directory:
//!
//! ```text
//! audit/<provider>.json         reasonability reports
//! harmonised/<provider>.csv     suppressed daily level-3 ODMs
//! indicators.csv anomalies.csv connectivity.csv
//! mfa/daily/<date>.csv mfa/persistent.csv mfa/stability.csv mfa/mfa.geojson
//! manifest.json
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use chrono::NaiveDate;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::harmonise::{
    build_harmonized, extrapolate, load_crosswalks, map_zones, rebin_time, write_harmonized, HarmonizedOdm, TimeTarget,
    ZoneCrosswalk, ZoneRegistry,
};
use crate::ingest::{load_feed, load_profile, CanonicalFeed, ProviderProfile, ThresholdMode};
use crate::mfa::{
    build_graph_from_feed, cluster_daily_with, daily_stability, export_mfa_geojson, fuzzy_intersect, write_daily_mfa,
    write_memberships, write_stability, ClusterConfig, DailyMfa, ZoneGeometries,
};
use crate::privacy::{
    reasonability_test, retention_sweep, suppress, AuditConfig, ReasonabilityReport, Strategy, SuppressionPolicy,
    SuppressionStats, CHECK_THRESHOLD, DEFAULT_K_OUT,
};
use crate::products::{
    compute_trend, connectivity_matrix, default_baseline, detect_anomalies, mobility_indicators, write_anomalies,
    write_connectivity, write_indicators, AnomalyConfig, ConnectivityMatrix,
};
use crate::time::{DateRange, WeekId};

/// Environment variable capping worker threads.
pub const THREADS_ENV: &str = "ODMFORGE_THREADS";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Config,
    Ingest,
    Reasonability,
    Harmonise,
    Indicators,
    Connectivity,
    Mfa,
    Retention,
    Output,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Config => "config",
            Stage::Ingest => "ingest",
            Stage::Reasonability => "reasonability",
            Stage::Harmonise => "harmonise",
            Stage::Indicators => "indicators",
            Stage::Connectivity => "connectivity",
            Stage::Mfa => "mfa",
            Stage::Retention => "retention",
            Stage::Output => "output",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("{stage} stage: {message}")]
    Stage { stage: Stage, message: String },
    #[error("reasonability stage: {} failed ({})", .failed.join(", "), .reports_dir.display())]
    AuditFailed { failed: Vec<String>, reports_dir: PathBuf },
}

impl PipelineError {
    pub fn stage(&self) -> Stage {
        match self {
            PipelineError::Stage { stage, .. } => *stage,
            PipelineError::AuditFailed { .. } => Stage::Reasonability,
        }
    }
}

pub type Result<T, E = PipelineError> = std::result::Result<T, E>;

fn at<E: fmt::Display>(stage: Stage, context: impl fmt::Display) -> impl FnOnce(E) -> PipelineError {
    move |e| PipelineError::Stage { stage, message: format!("{context}: {e}") }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderInput {
    pub profile: PathBuf,
    pub feed: PathBuf,
    /// Zone polygons (WKT CSV or GeoJSON) for MFA maps.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub geometry: Option<PathBuf>,
}

/// Run configuration. Relative paths are taken relative to `base_dir`, the
/// directory of the config file when loaded from disk.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub zones: PathBuf,
    pub crosswalks: Vec<PathBuf>,
    pub providers: Vec<ProviderInput>,
    pub output_dir: PathBuf,
    #[serde(default = "default_level")]
    pub level: u8,
    #[serde(default = "default_k_out")]
    pub k_out: u32,
    #[serde(default)]
    pub strategy: Strategy,
    /// `START:END`; the earliest four complete ISO weeks when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub baseline: Option<String>,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub threshold_mode: ThresholdMode,
    /// Provider whose zoning feeds the MFAs; the one with most zones when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mfa_provider: Option<String>,
    #[serde(default)]
    pub cluster: ClusterConfig,
    #[serde(default)]
    pub anomaly: AnomalyConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention_days: Option<u32>,
    /// Raw-data store swept when `retention_days` is set.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retention_store: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_level() -> u8 {
    3
}

fn default_k_out() -> u32 {
    DEFAULT_K_OUT
}

fn default_alpha() -> f64 {
    crate::mfa::DEFAULT_ALPHA
}

impl RunConfig {
    pub fn from_toml_str(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut config: Self = toml::from_str(text).map_err(at(Stage::Config, "parse"))?;
        config.base_dir = base_dir.into();
        Ok(config)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(at(Stage::Config, path.display()))?;
        Self::from_toml_str(&text, path.parent().unwrap_or(Path::new(".")))
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Config for a directory written by [`crate::synth::Scenario::write`].
    pub fn for_scenario(scenario: &crate::synth::Scenario, output_dir: impl Into<PathBuf>) -> Self {
        let providers = scenario
            .providers
            .iter()
            .map(|p| {
                let id = &p.spec.provider_id;
                ProviderInput {
                    profile: format!("profiles/{id}.toml").into(),
                    feed: format!("feeds/{id}.csv").into(),
                    geometry: Some(format!("geometry/{id}.csv").into()),
                }
            })
            .collect();
        Self {
            zones: "zones.csv".into(),
            crosswalks: vec!["crosswalks.csv".into()],
            providers,
            output_dir: output_dir.into(),
            level: 3,
            k_out: DEFAULT_K_OUT,
            strategy: Strategy::Drop,
            baseline: None,
            alpha: crate::mfa::DEFAULT_ALPHA,
            threshold_mode: ThresholdMode::Strict,
            mfa_provider: None,
            cluster: ClusterConfig::default(),
            anomaly: AnomalyConfig::default(),
            retention_days: None,
            retention_store: None,
            base_dir: PathBuf::new(),
        }
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn output_path(&self) -> PathBuf {
        self.resolve(&self.output_dir)
    }

    pub fn baseline_range(&self) -> Result<Option<DateRange>> {
        self.baseline.as_deref().map(|b| b.parse().map_err(at(Stage::Config, "baseline"))).transpose()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(PipelineError::Stage { stage: Stage::Config, message: m });
        if self.level > 3 {
            return bad(format!("level {} is outside 0..=3", self.level));
        }
        if self.k_out == 0 {
            return bad("k_out must be at least 1".into());
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha {} is outside (0, 1]", self.alpha));
        }
        if self.providers.is_empty() {
            return bad("no providers configured".into());
        }
        self.baseline_range()?;
        let mut files = vec![&self.zones];
        files.extend(&self.crosswalks);
        for p in &self.providers {
            files.extend([&p.profile, &p.feed]);
            files.extend(&p.geometry);
        }
        for f in files {
            if !self.resolve(f).is_file() {
                return bad(format!("{} does not exist", self.resolve(f).display()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StageCount {
    pub stage: String,
    pub provider: String,
    pub rows_in: u64,
    pub rows_out: u64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    /// Data rows, for CSV files.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rows: Option<u64>,
    pub sha256: String,
}

/// Everything needed to reproduce and audit a run. Carries no timestamps, so
/// identical runs produce identical manifests.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub config_sha256: String,
    pub inputs: BTreeMap<String, String>,
    pub level: u8,
    pub k_out: u32,
    /// Output threshold actually applied per provider: never below the
    /// provider's own threshold.
    pub effective_k_out: BTreeMap<String, u32>,
    pub baseline: BTreeMap<String, String>,
    pub audit: BTreeMap<String, String>,
    pub stages: Vec<StageCount>,
    pub suppression: BTreeMap<String, SuppressionStats>,
    pub connectivity_suppression: BTreeMap<String, SuppressionStats>,
    pub mfa_provider: Option<String>,
    pub outputs: BTreeMap<String, OutputFile>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub purged: Option<Vec<String>>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serialises")
    }

    fn count(&mut self, stage: &str, provider: &str, rows_in: usize, rows_out: usize) {
        self.stages.push(StageCount { stage: stage.into(), provider: provider.into(), rows_in: rows_in as u64, rows_out: rows_out as u64 });
    }
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes files under the output directory and records them for the manifest.
struct Outputs {
    root: PathBuf,
    files: BTreeMap<String, OutputFile>,
}

impl Outputs {
    fn put(&mut self, rel: &str, bytes: Vec<u8>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(at(Stage::Output, dir.display()))?;
        }
        let rows = rel.ends_with(".csv").then(|| bytes.iter().filter(|b| **b == b'\n').count().saturating_sub(1) as u64);
        self.files.insert(rel.to_string(), OutputFile { rows, sha256: sha256_hex(&bytes) });
        std::fs::write(&path, bytes).map_err(at(Stage::Output, path.display()))
    }

    fn render<E: fmt::Display>(&mut self, stage: Stage, rel: &str, f: impl FnOnce(&mut Vec<u8>) -> Result<(), E>) -> Result<()> {
        let mut buf = Vec::new();
        f(&mut buf).map_err(at(stage, rel))?;
        self.put(rel, buf)
    }

    /// Writes without recording: for files carrying a timestamp, which the
    /// manifest must not depend on.
    fn put_unrecorded(&self, rel: &str, bytes: Vec<u8>) -> Result<()> {
        let path = self.root.join(rel);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(at(Stage::Output, dir.display()))?;
        }
        std::fs::write(&path, bytes).map_err(at(Stage::Output, path.display()))
    }
}

/// Product paths removed before a run so a failed run never leaves stale
/// products behind.
const PRODUCT_PATHS: [&str; 7] =
    ["harmonised", "indicators.csv", "anomalies.csv", "connectivity.csv", "mfa", "manifest.json", "audit"];

fn clear_products(root: &Path) -> Result<()> {
    for rel in PRODUCT_PATHS {
        let p = root.join(rel);
        let res = if p.is_dir() {
            std::fs::remove_dir_all(&p)
        } else if p.exists() {
            std::fs::remove_file(&p)
        } else {
            Ok(())
        };
        res.map_err(at(Stage::Output, p.display()))?;
    }
    Ok(())
}

/// A provider after ingest and audit.
pub struct IngestedProvider {
    pub profile: ProviderProfile,
    pub feed: CanonicalFeed,
    pub report: ReasonabilityReport,
    pub geometry: Option<PathBuf>,
}

impl IngestedProvider {
    pub fn id(&self) -> &str {
        &self.profile.provider_id
    }
}

/// Whether a report lets the run proceed. In permissive mode a failing
/// threshold check alone is tolerated (outputs are still suppressed).
pub fn audit_allows(report: &ReasonabilityReport, mode: ThresholdMode) -> bool {
    report.passed()
        || (mode == ThresholdMode::Permissive && report.checks.iter().all(|c| c.passed || c.name == CHECK_THRESHOLD))
}

/// Loads every provider and runs its reasonability test. Rows are read
/// permissively so the audit, not the parser, decides about thresholds.
pub fn ingest_and_audit(config: &RunConfig) -> Result<Vec<IngestedProvider>> {
    config
        .providers
        .par_iter()
        .map(|input| {
            let profile = load_profile(config.resolve(&input.profile)).map_err(at(Stage::Ingest, input.profile.display()))?;
            let feed = load_feed(config.resolve(&input.feed), &profile, ThresholdMode::Permissive)
                .map_err(at(Stage::Ingest, input.feed.display()))?;
            let report = reasonability_test(&feed, &profile, &AuditConfig::default());
            Ok(IngestedProvider { profile, feed, report, geometry: input.geometry.clone() })
        })
        .collect()
}

/// Output policy for one provider.
pub fn effective_policy(config: &RunConfig, profile: &ProviderProfile) -> Result<SuppressionPolicy> {
    let k = config.k_out.max(profile.threshold_k);
    if k > config.k_out {
        log::warn!("{}: output threshold raised from {} to the provider's {}", profile.provider_id, config.k_out, k);
    }
    SuppressionPolicy::for_providers(k, config.strategy, [profile.threshold_k]).map_err(at(Stage::Config, &profile.provider_id))
}

/// Provider-zoned feed binned to days.
pub fn daily_feed(feed: &CanonicalFeed) -> Result<CanonicalFeed> {
    rebin_time(feed, TimeTarget::Daily).map_err(at(Stage::Harmonise, &feed.meta.provider_id))
}

/// Daily level-3 ODMs for one provider, before output suppression.
pub fn harmonise_provider(
    daily: &CanonicalFeed,
    profile: &ProviderProfile,
    crosswalks: &BTreeMap<String, ZoneCrosswalk>,
    registry: &ZoneRegistry,
) -> Result<Vec<HarmonizedOdm>> {
    let id = &profile.provider_id;
    profile.check_zoning(crosswalks.keys().map(String::as_str)).map_err(at(Stage::Harmonise, id))?;
    let mapped = map_zones(daily, &crosswalks[&profile.zoning_id], registry, 3).map_err(at(Stage::Harmonise, id))?;
    let scaled = if profile.extrapolated { mapped } else { extrapolate(&mapped, profile).map_err(at(Stage::Harmonise, id))? };
    build_harmonized(&[scaled], registry, 3).map_err(at(Stage::Harmonise, id))
}

pub struct RunSummary {
    pub manifest: Manifest,
    pub output_dir: PathBuf,
}

/// Runs every stage, inside a thread pool sized by `ODMFORGE_THREADS` when set.
pub fn run_pipeline(config: &RunConfig) -> Result<RunSummary> {
    match std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n > 0 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(at(Stage::Config, THREADS_ENV))?
            .install(|| run_stages(config)),
        _ => run_stages(config),
    }
}

fn run_stages(config: &RunConfig) -> Result<RunSummary> {
    config.validate()?;
    let root = config.output_path();
    std::fs::create_dir_all(&root).map_err(at(Stage::Output, root.display()))?;
    clear_products(&root)?;
    let mut out = Outputs { root: root.clone(), files: BTreeMap::new() };
    let mut manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").into(),
        version: env!("CARGO_PKG_VERSION").into(),
        config_sha256: sha256_hex(config.to_toml_string().as_bytes()),
        level: config.level,
        k_out: config.k_out,
        ..Default::default()
    };
    let mut inputs: Vec<&PathBuf> = vec![&config.zones];
    inputs.extend(&config.crosswalks);
    for p in &config.providers {
        inputs.extend([&p.profile, &p.feed]);
        inputs.extend(&p.geometry);
    }
    for p in inputs {
        let bytes = std::fs::read(config.resolve(p)).map_err(at(Stage::Config, p.display()))?;
        manifest.inputs.insert(p.display().to_string(), sha256_hex(&bytes));
    }

    let registry = ZoneRegistry::load(config.resolve(&config.zones)).map_err(at(Stage::Config, config.zones.display()))?;
    let mut crosswalks = BTreeMap::new();
    for x in &config.crosswalks {
        crosswalks.extend(load_crosswalks(config.resolve(x)).map_err(at(Stage::Config, x.display()))?);
    }

    // ingest + reasonability gate
    let providers = ingest_and_audit(config)?;
    let mut failed = Vec::new();
    for p in &providers {
        manifest.count("ingest", p.id(), p.feed.cells.len(), p.feed.cells.len());
        let ok = audit_allows(&p.report, config.threshold_mode);
        if !p.report.passed() && ok {
            log::warn!("{}: threshold check failed; continuing in permissive mode", p.id());
        }
        manifest.audit.insert(p.id().to_string(), if p.report.passed() { "pass" } else if ok { "tolerated" } else { "fail" }.into());
        out.put_unrecorded(&format!("audit/{}.json", p.id()), p.report.to_json().into_bytes())?;
        if !ok {
            failed.push(p.id().to_string());
        }
    }
    if !failed.is_empty() {
        return Err(PipelineError::AuditFailed { failed, reports_dir: root.join("audit") });
    }

    // harmonise + suppress
    let daily: Vec<CanonicalFeed> = providers.par_iter().map(|p| daily_feed(&p.feed)).collect::<Result<_>>()?;
    let harmonised: Vec<(Vec<HarmonizedOdm>, SuppressionStats, SuppressionPolicy)> = providers
        .par_iter()
        .zip(&daily)
        .map(|(p, d)| {
            let odms = harmonise_provider(d, &p.profile, &crosswalks, &registry)?;
            let policy = effective_policy(config, &p.profile)?;
            let mut stats = SuppressionStats::default();
            let kept = odms
                .iter()
                .map(|o| {
                    let (s, st) = suppress(o, &policy);
                    stats += st;
                    s
                })
                .collect();
            Ok((kept, stats, policy))
        })
        .collect::<Result<_>>()?;
    for (p, (odms, stats, policy)) in providers.iter().zip(&harmonised) {
        let cells: usize = odms.iter().map(|o| o.cells.len()).sum();
        manifest.count("harmonise", p.id(), p.feed.cells.len(), stats.cells_in as usize);
        manifest.count("suppress", p.id(), stats.cells_in as usize, cells);
        manifest.suppression.insert(p.id().to_string(), *stats);
        manifest.effective_k_out.insert(p.id().to_string(), policy.k_out);
        out.render(Stage::Harmonise, &format!("harmonised/{}.csv", p.id()), |buf| write_harmonized(odms, buf))?;
    }

    // indicators, trends, anomalies
    let explicit_baseline = config.baseline_range()?;
    let mut all_series = Vec::new();
    let mut flags = Vec::new();
    for (p, (odms, _, _)) in providers.iter().zip(&harmonised) {
        let series = mobility_indicators(odms, &registry, config.level).map_err(at(Stage::Indicators, p.id()))?;
        let baseline = explicit_baseline.or_else(|| series.first().and_then(default_baseline));
        match baseline {
            Some(b) => {
                manifest.baseline.insert(p.id().to_string(), b.to_string());
                for s in series {
                    let with_trend = compute_trend(&s, b).map_err(at(Stage::Indicators, format!("{} {}", p.id(), s.region)))?;
                    all_series.push(with_trend);
                }
            }
            None => {
                log::warn!("{}: no four complete weeks for a default baseline; trends left empty", p.id());
                all_series.extend(series);
            }
        }
        manifest.count("indicators", p.id(), odms.len(), all_series.iter().filter(|s| s.provider_id == p.id()).count());
    }
    for s in &all_series {
        flags.extend(detect_anomalies(s, &config.anomaly));
    }
    out.render(Stage::Indicators, "indicators.csv", |buf| write_indicators(&all_series, buf))?;
    out.render(Stage::Indicators, "anomalies.csv", |buf| write_anomalies(&flags, buf))?;

    // connectivity
    let mut matrices: Vec<ConnectivityMatrix> = Vec::new();
    for (p, (odms, _, policy)) in providers.iter().zip(&harmonised) {
        let mut weeks: Vec<WeekId> = odms.iter().map(|o| WeekId::of(o.day)).collect();
        weeks.dedup();
        let mut stats = SuppressionStats::default();
        for w in weeks {
            for m in connectivity_matrix(odms, w, policy).map_err(at(Stage::Connectivity, p.id()))? {
                stats += m.suppression;
                matrices.push(m);
            }
        }
        manifest.connectivity_suppression.insert(p.id().to_string(), stats);
    }
    out.render(Stage::Connectivity, "connectivity.csv", |buf| write_connectivity(&matrices, buf))?;

    // MFAs
    let mfa_index = match &config.mfa_provider {
        Some(id) => providers.iter().position(|p| p.id() == id).ok_or_else(|| PipelineError::Stage {
            stage: Stage::Config,
            message: format!("mfa_provider {id} is not configured"),
        })?,
        None => (0..providers.len()).max_by_key(|&i| (providers[i].feed.zones().len(), std::cmp::Reverse(i))).expect("non-empty"),
    };
    let source = &providers[mfa_index];
    manifest.mfa_provider = Some(source.id().to_string());
    let days: Vec<NaiveDate> = daily[mfa_index].days();
    let daily_mfas: Vec<DailyMfa> = days
        .par_iter()
        .map(|&d| build_graph_from_feed(&daily[mfa_index], d).map(|g| cluster_daily_with(&g, &config.cluster)))
        .collect::<Result<_, _>>()
        .map_err(at(Stage::Mfa, source.id()))?;
    for d in &daily_mfas {
        out.render(Stage::Mfa, &format!("mfa/daily/{}.csv", d.day), |buf| write_daily_mfa(d, buf))?;
    }
    if !daily_mfas.is_empty() {
        let persistent = fuzzy_intersect(&daily_mfas, config.alpha).map_err(at(Stage::Mfa, source.id()))?;
        manifest.count("mfa", source.id(), daily_mfas.len(), persistent.len());
        out.render(Stage::Mfa, "mfa/persistent.csv", |buf| write_memberships(&persistent, buf))?;
        out.render(Stage::Mfa, "mfa/stability.csv", |buf| write_stability(&daily_stability(&daily_mfas), buf))?;
        if let Some(g) = &source.geometry {
            let geometries = ZoneGeometries::load(config.resolve(g)).map_err(at(Stage::Mfa, g.display()))?;
            let fc = export_mfa_geojson(&persistent, &geometries).map_err(at(Stage::Mfa, source.id()))?;
            out.put("mfa/mfa.geojson", geojson::GeoJson::from(fc).to_string().into_bytes())?;
        }
    }

    // retention
    if let Some(days) = config.retention_days {
        match &config.retention_store {
            Some(store) => {
                let today = chrono::Utc::now().date_naive();
                let purged = retention_sweep(&config.resolve(store), days, today).map_err(at(Stage::Retention, store.display()))?;
                manifest.purged = Some(purged.iter().map(|p| p.display().to_string()).collect());
            }
            None => log::warn!("retention_days set without retention_store; nothing swept"),
        }
    }

    manifest.outputs = out.files.clone();
    out.put("manifest.json", manifest.to_json().into_bytes())?;
    Ok(RunSummary { manifest, output_dir: root })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_round_trip() {
        let text = r#"
            zones = "zones.csv"
            crosswalks = ["x.csv"]
            output_dir = "out"
            [[providers]]
            profile = "p.toml"
            feed = "p.csv"
        "#;
        let c = RunConfig::from_toml_str(text, "/data").unwrap();
        assert_eq!((c.level, c.k_out, c.alpha), (3, 20, 0.5));
        assert_eq!(c.output_path(), PathBuf::from("/data/out"));
        let again = RunConfig::from_toml_str(&c.to_toml_string(), "/data").unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn config_validation_names_the_stage() {
        let mut c = RunConfig::from_toml_str("zones='z'\ncrosswalks=[]\noutput_dir='o'\nproviders=[]", ".").unwrap();
        let err = c.validate().unwrap_err();
        assert_eq!(err.stage(), Stage::Config);
        c.baseline = Some("2020-03-01".into());
        assert!(c.baseline_range().is_err());
        assert!(RunConfig::from_toml_str("zones='z'\nbogus=1", ".").is_err());
    }

    #[test]
    fn effective_threshold_never_weakens_provider() {
        let c = RunConfig::from_toml_str("zones='z'\ncrosswalks=[]\noutput_dir='o'\nproviders=[]", ".").unwrap();
        let mut profile = crate::synth::ScenarioSpec::default_scenario().providers[1].profile();
        assert_eq!(effective_policy(&c, &profile).unwrap().k_out, 30);
        profile.threshold_k = 10;
        assert_eq!(effective_policy(&c, &profile).unwrap().k_out, 20);
    }
}
