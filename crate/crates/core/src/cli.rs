//! Command-line front end. Each subcommand runs one module on files; `run`
//! chains them all.

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use crate::harmonise::{load_crosswalks, load_harmonized, write_harmonized, ZoneRegistry};
use crate::ingest::{load_feed, load_profile, ThresholdMode};
use crate::mfa::{
    cluster_daily_with, build_graph, daily_stability, export_mfa_geojson, fuzzy_intersect, read_daily_mfas, write_daily_mfa,
    write_memberships, write_stability, ClusterConfig, DailyMfa, ZoneGeometries,
};
use crate::pipeline::{audit_allows, daily_feed, effective_policy, harmonise_provider, ingest_and_audit, run_pipeline, RunConfig};
use crate::privacy::{reasonability_test, retention_sweep, suppress, AuditConfig, SuppressionPolicy};
use crate::products::{
    compute_trend, connectivity_matrix, default_baseline, detect_anomalies, mobility_indicators, write_anomalies,
    write_connectivity, write_indicators, AnomalyConfig,
};
use crate::synth::{generate_scenario, ScenarioSpec};
use crate::time::{DateRange, WeekId};

#[derive(Debug, Parser)]
#[command(name = "odmforge", version, about = "Harmonise multi-provider origin-destination matrices into comparable mobility products")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scenario (default scenario without --config).
    Synth {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Reasonability test of one provider feed; exits nonzero on failure.
    Audit {
        #[arg(long)]
        profile: PathBuf,
        #[arg(long)]
        feed: PathBuf,
        /// Write the JSON report here instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
        #[command(flatten)]
        mode: ModeFlags,
    },
    /// Ingest, audit, harmonise and suppress every configured provider.
    Harmonise {
        #[command(flatten)]
        run: RunFlags,
    },
    /// Indicators, trends and anomaly flags from harmonised ODM files.
    Indicators {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        zones: PathBuf,
        #[arg(long, default_value_t = 3)]
        level: u8,
        #[arg(long)]
        baseline: Option<DateRange>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Weekly connectivity matrices from harmonised ODM files.
    Connectivity {
        #[arg(long, required = true, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long, default_value_t = crate::privacy::DEFAULT_K_OUT)]
        k_out: u32,
        #[arg(long)]
        output: PathBuf,
    },
    /// Persistent MFAs from daily MFA files, or from harmonised ODMs with --harmonised.
    Mfa {
        #[arg(long, num_args = 1..)]
        input: Vec<PathBuf>,
        #[arg(long)]
        harmonised: Option<PathBuf>,
        #[arg(long, default_value_t = crate::mfa::DEFAULT_ALPHA)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        resolution: f64,
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long)]
        output: PathBuf,
    },
    /// Purge raw files older than the retention horizon.
    Sweep {
        #[arg(long)]
        store: PathBuf,
        #[arg(long)]
        retention_days: u32,
        /// Reference date (defaults to today, UTC).
        #[arg(long)]
        today: Option<chrono::NaiveDate>,
    },
    /// Full pipeline.
    Run {
        #[command(flatten)]
        run: RunFlags,
    },
}

#[derive(Debug, Args)]
pub struct ModeFlags {
    #[arg(long, conflicts_with = "permissive")]
    pub strict: bool,
    #[arg(long)]
    pub permissive: bool,
}

impl ModeFlags {
    fn mode(&self) -> Option<ThresholdMode> {
        match (self.strict, self.permissive) {
            (true, _) => Some(ThresholdMode::Strict),
            (_, true) => Some(ThresholdMode::Permissive),
            _ => None,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunFlags {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub level: Option<u8>,
    #[arg(long)]
    pub k_out: Option<u32>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub baseline: Option<DateRange>,
    #[arg(long)]
    pub output: Option<PathBuf>,
    #[arg(long)]
    pub retention_days: Option<u32>,
    #[command(flatten)]
    pub mode: ModeFlags,
}

impl RunFlags {
    pub fn load(&self) -> anyhow::Result<RunConfig> {
        let mut c = RunConfig::load(&self.config)?;
        if let Some(v) = self.level {
            c.level = v;
        }
        if let Some(v) = self.k_out {
            c.k_out = v;
        }
        if let Some(v) = self.alpha {
            c.alpha = v;
        }
        if let Some(v) = self.baseline {
            c.baseline = Some(v.to_string());
        }
        if let Some(v) = &self.output {
            // relative to the working directory, not the config file
            c.output_dir = std::path::absolute(v)?;
        }
        if let Some(v) = self.retention_days {
            c.retention_days = Some(v);
        }
        if let Some(m) = self.mode.mode() {
            c.threshold_mode = m;
        }
        Ok(c)
    }
}

fn create(path: &std::path::Path) -> anyhow::Result<std::io::BufWriter<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    Ok(std::io::BufWriter::new(std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn load_odms(inputs: &[PathBuf]) -> anyhow::Result<Vec<Vec<crate::harmonise::HarmonizedOdm>>> {
    let mut by_provider: std::collections::BTreeMap<String, Vec<_>> = Default::default();
    for p in inputs {
        for odm in load_harmonized(p).with_context(|| format!("reading {}", p.display()))? {
            by_provider.entry(odm.provider_id.clone()).or_default().push(odm);
        }
    }
    Ok(by_provider.into_values().collect())
}

/// Runs a parsed command. Errors carry the stage in their message.
pub fn execute(cli: Cli) -> anyhow::Result<ExitCode> {
    match cli.command {
        Command::Synth { config, seed, output } => {
            let mut spec = match config {
                Some(p) => ScenarioSpec::load(p)?,
                None => ScenarioSpec::default_scenario(),
            };
            if let Some(s) = seed {
                spec.seed = s;
            }
            let scenario = generate_scenario(&spec)?;
            scenario.write(&output)?;
            let run = RunConfig::for_scenario(&scenario, "out");
            std::fs::write(output.join("run.toml"), run.to_toml_string())?;
            println!("scenario written to {} (run with --config {})", output.display(), output.join("run.toml").display());
        }
        Command::Audit { profile, feed, output, mode } => {
            let profile = load_profile(&profile)?;
            let feed = load_feed(&feed, &profile, ThresholdMode::Permissive)?;
            let report = reasonability_test(&feed, &profile, &AuditConfig::default());
            match output {
                Some(p) => std::fs::write(&p, report.to_json()).with_context(|| format!("writing {}", p.display()))?,
                None => println!("{}", report.to_json()),
            }
            if !audit_allows(&report, mode.mode().unwrap_or_default()) {
                eprintln!("reasonability: {} failed", profile.provider_id);
                return Ok(ExitCode::FAILURE);
            }
        }
        Command::Harmonise { run } => {
            let config = run.load()?;
            config.validate()?;
            let registry = ZoneRegistry::load(config.resolve(&config.zones))?;
            let mut crosswalks = std::collections::BTreeMap::new();
            for x in &config.crosswalks {
                crosswalks.extend(load_crosswalks(config.resolve(x))?);
            }
            let providers = ingest_and_audit(&config)?;
            if let Some(p) = providers.iter().find(|p| !audit_allows(&p.report, config.threshold_mode)) {
                eprintln!("{}", p.report.to_json());
                bail!("reasonability stage: {} failed", p.id());
            }
            let root = config.output_path().join("harmonised");
            for p in &providers {
                let odms = harmonise_provider(&daily_feed(&p.feed)?, &p.profile, &crosswalks, &registry)?;
                let policy = effective_policy(&config, &p.profile)?;
                let kept: Vec<_> = odms.iter().map(|o| suppress(o, &policy).0).collect();
                let path = root.join(format!("{}.csv", p.id()));
                write_harmonized(&kept, create(&path)?)?;
                println!("{}", path.display());
            }
        }
        Command::Indicators { input, zones, level, baseline, output } => {
            let registry = ZoneRegistry::load(&zones)?;
            let mut series = Vec::new();
            let mut flags = Vec::new();
            for odms in load_odms(&input)? {
                for s in mobility_indicators(&odms, &registry, level)? {
                    let s = match baseline.or_else(|| default_baseline(&s)) {
                        Some(b) => compute_trend(&s, b)?,
                        None => s,
                    };
                    flags.extend(detect_anomalies(&s, &AnomalyConfig::default()));
                    series.push(s);
                }
            }
            write_indicators(&series, create(&output.join("indicators.csv"))?)?;
            write_anomalies(&flags, create(&output.join("anomalies.csv"))?)?;
            println!("{} series, {} anomaly flags", series.len(), flags.len());
        }
        Command::Connectivity { input, k_out, output } => {
            let policy = SuppressionPolicy::new(k_out, Default::default())?;
            let mut matrices = Vec::new();
            for odms in load_odms(&input)? {
                let mut weeks: Vec<WeekId> = odms.iter().map(|o| WeekId::of(o.day)).collect();
                weeks.sort();
                weeks.dedup();
                for w in weeks {
                    matrices.extend(connectivity_matrix(&odms, w, &policy)?);
                }
            }
            write_connectivity(&matrices, create(&output.join("connectivity.csv"))?)?;
            println!("{} matrices", matrices.len());
        }
        Command::Mfa { input, harmonised, alpha, resolution, geometry, output } => {
            let mut daily: Vec<DailyMfa> = Vec::new();
            for p in &input {
                daily.extend(read_daily_mfas(std::fs::File::open(p).with_context(|| format!("reading {}", p.display()))?)?);
            }
            if let Some(h) = harmonised {
                let config = ClusterConfig { resolution };
                for odm in load_harmonized(&h)? {
                    let mfa = cluster_daily_with(&build_graph(&odm)?, &config);
                    write_daily_mfa(&mfa, create(&output.join(format!("daily/{}.csv", mfa.day)))?)?;
                    daily.push(mfa);
                }
            }
            if daily.is_empty() {
                bail!("mfa stage: no daily MFAs given (use --input or --harmonised)");
            }
            daily.sort_by_key(|d| d.day);
            let persistent = fuzzy_intersect(&daily, alpha)?;
            write_memberships(&persistent, create(&output.join("persistent.csv"))?)?;
            write_stability(&daily_stability(&daily), create(&output.join("stability.csv"))?)?;
            if let Some(g) = geometry {
                let fc = export_mfa_geojson(&persistent, &ZoneGeometries::load(g)?)?;
                std::fs::write(output.join("mfa.geojson"), geojson::GeoJson::from(fc).to_string())?;
            }
            println!("{} persistent MFAs from {} days", persistent.len(), daily.len());
        }
        Command::Sweep { store, retention_days, today } => {
            let today = today.unwrap_or_else(|| chrono::Utc::now().date_naive());
            for p in retention_sweep(&store, retention_days, today)? {
                println!("{}", p.display());
            }
        }
        Command::Run { run } => {
            let summary = run_pipeline(&run.load()?)?;
            println!("{} outputs written to {}", summary.manifest.outputs.len(), summary.output_dir.display());
        }
    }
    Ok(ExitCode::SUCCESS)
}

/// Parses `args` and runs the command, printing errors with their stage.
pub fn main_with<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match execute(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
