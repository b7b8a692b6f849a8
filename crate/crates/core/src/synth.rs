//! Synthetic multi-provider scenarios with known ground truth.
//!
//! Flows come from a gravity model over a grid of small "atoms" laid out as
//! two metro areas separated by a gap. Every provider sees the same truth
//! through its own zoning (blocks of atoms), time windows, market share,
//! extrapolation state and confidentiality threshold.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Datelike, Duration, NaiveDate, Weekday};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal, Uniform};
use serde::{Deserialize, Serialize};

use crate::harmonise::{HarmonizedOdm, ZoneCrosswalk, ZoneRegistry};
use crate::ingest::{
    canonicalize, Attributes, CanonicalFeed, OdmCell, ProviderProfile, StopTime, TimeWindow, ZoneId, MINUTES_PER_DAY,
};
use crate::time::format_timestamp;

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid scenario: {0}")]
    InvalidSpec(String),
    #[error("scenario syntax: {0}")]
    Syntax(#[from] toml::de::Error),
    #[error("io error on {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Harmonise(#[from] crate::harmonise::HarmoniseError),
    #[error(transparent)]
    Ingest(#[from] crate::ingest::IngestError),
}

pub type Result<T, E = SynthError> = std::result::Result<T, E>;

fn invalid(msg: impl Into<String>) -> SynthError {
    SynthError::InvalidSpec(msg.into())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioSpec {
    pub seed: u64,
    pub start: NaiveDate,
    pub days: u32,
    /// Sigma of the multiplicative log-normal noise on every true flow.
    #[serde(default = "default_sigma")]
    pub noise_sigma: f64,
    /// Multiplier applied on Saturdays and Sundays.
    #[serde(default = "one")]
    pub weekend_factor: f64,
    pub geography: Geography,
    pub gravity: Gravity,
    #[serde(default)]
    pub modulation: Vec<Modulation>,
    pub providers: Vec<ProviderSpec>,
}

fn default_sigma() -> f64 {
    0.1
}

fn one() -> f64 {
    1.0
}

/// A `columns x rows` grid of square atoms. The left and right halves are
/// the two metros, `metro_gap_km` apart.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Geography {
    pub country: String,
    pub columns: u32,
    pub rows: u32,
    pub spacing_km: f64,
    pub metro_gap_km: f64,
    /// Distance used for trips that start and end in the same atom.
    pub self_distance_km: f64,
    /// Row-major atom populations; drawn from `population_range` when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub populations: Option<Vec<f64>>,
    #[serde(default = "default_population_range")]
    pub population_range: [f64; 2],
    /// South-west corner of the grid, WGS84 degrees.
    #[serde(default = "default_origin")]
    pub origin_lonlat: [f64; 2],
}

fn default_population_range() -> [f64; 2] {
    [20_000.0, 60_000.0]
}

fn default_origin() -> [f64; 2] {
    [10.0, 45.0]
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gravity {
    pub scale: f64,
    pub distance_decay: f64,
}

/// Multiplies flows leaving `region` (a reference-code prefix, or every zone
/// when absent) on each day of `from..=to`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Modulation {
    pub from: NaiveDate,
    pub to: NaiveDate,
    pub factor: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub region: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProviderSpec {
    pub provider_id: String,
    /// Zone size in atoms, `[columns, rows]`.
    pub block: [u32; 2],
    /// Column/row at which the first full block starts.
    #[serde(default)]
    pub offset: [u32; 2],
    pub zone_prefix: String,
    pub window_minutes: u32,
    pub threshold_k: u32,
    /// Share of the population observed by this provider.
    pub market_share: f64,
    #[serde(default)]
    pub extrapolated: bool,
    pub stop_time_minutes: StopTime,
    /// Canonical field -> CSV header.
    #[serde(default)]
    pub columns: BTreeMap<String, String>,
}

impl ProviderSpec {
    pub fn zoning_id(&self) -> String {
        format!("{}-zones", self.provider_id)
    }

    pub fn profile(&self) -> ProviderProfile {
        ProviderProfile {
            provider_id: self.provider_id.clone(),
            zoning_id: self.zoning_id(),
            window_minutes: self.window_minutes,
            stop_time_minutes: self.stop_time_minutes,
            extrapolated: self.extrapolated,
            market_share: (!self.extrapolated).then_some(self.market_share),
            threshold_k: self.threshold_k,
            column_map: self.columns.clone(),
            crs_id: "EPSG:4326".into(),
        }
    }

    fn block_of(&self, col: u32, row: u32) -> (u32, u32) {
        let [bw, bh] = self.block;
        let [ox, oy] = self.offset;
        ((col + (bw - ox) % bw) / bw, (row + (bh - oy) % bh) / bh)
    }
}

impl ScenarioSpec {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let spec: Self = toml::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io { path: path.into(), source })?;
        Self::from_toml_str(&text)
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("scenario serialises")
    }

    /// Two metros of 4x4 atoms, nine weeks from Monday 2020-02-03 with a
    /// lockdown from mid-March, and three providers:
    ///
    /// | provider | zones | window | K | counts |
    /// |---|---|---|---|---|
    /// | `mno_a` | single atoms | 1 h | 10 | devices |
    /// | `mno_b` | 3x2 atoms | 24 h | 30 | extrapolated |
    /// | `mno_c` | 2x2 atoms, shifted | 8 h | 20 | devices |
    pub fn default_scenario() -> Self {
        let d = |m, day| NaiveDate::from_ymd_opt(2020, m, day).expect("valid date");
        let end = d(4, 5);
        Self {
            seed: 20_200_203,
            start: d(2, 3),
            days: 63,
            noise_sigma: 0.1,
            weekend_factor: 0.6,
            geography: Geography {
                country: "SY".into(),
                columns: 8,
                rows: 4,
                spacing_km: 1.0,
                metro_gap_km: 30.0,
                self_distance_km: 0.5,
                populations: None,
                population_range: default_population_range(),
                origin_lonlat: default_origin(),
            },
            gravity: Gravity { scale: 1e-5, distance_decay: 1.5 },
            modulation: vec![
                Modulation { from: d(3, 9), to: d(3, 15), factor: 0.8, region: None },
                Modulation { from: d(3, 16), to: end, factor: 0.45, region: None },
                Modulation { from: d(3, 23), to: end, factor: 0.8, region: Some("SY2".into()) },
                Modulation { from: d(3, 30), to: end, factor: 1.3, region: Some("SY1".into()) },
            ],
            providers: vec![
                ProviderSpec {
                    provider_id: "mno_a".into(),
                    block: [1, 1],
                    offset: [0, 0],
                    zone_prefix: "A".into(),
                    window_minutes: 60,
                    threshold_k: 10,
                    market_share: 0.35,
                    extrapolated: false,
                    stop_time_minutes: StopTime::Minutes(15),
                    columns: BTreeMap::new(),
                },
                ProviderSpec {
                    provider_id: "mno_b".into(),
                    block: [3, 2],
                    offset: [0, 0],
                    zone_prefix: "B".into(),
                    window_minutes: MINUTES_PER_DAY,
                    threshold_k: 30,
                    market_share: 0.3,
                    extrapolated: true,
                    stop_time_minutes: StopTime::Minutes(30),
                    columns: [("origin", "orig_zone"), ("destination", "dest_zone"), ("window_start", "period_start"), ("count", "trips")]
                        .into_iter()
                        .map(|(a, b)| (a.to_string(), b.to_string()))
                        .collect(),
                },
                ProviderSpec {
                    provider_id: "mno_c".into(),
                    block: [2, 2],
                    offset: [1, 1],
                    zone_prefix: "C".into(),
                    window_minutes: 480,
                    threshold_k: 20,
                    market_share: 0.25,
                    extrapolated: false,
                    stop_time_minutes: StopTime::TimeWindowMajority,
                    columns: BTreeMap::new(),
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        // both reject NaN
        let positive = |x: f64| x > 0.0;
        let non_negative = |x: f64| x >= 0.0;
        let g = &self.geography;
        if !positive(self.gravity.distance_decay) {
            return Err(invalid("distance_decay must be positive"));
        }
        if !positive(self.gravity.scale) {
            return Err(invalid("gravity scale must be positive"));
        }
        if !non_negative(self.noise_sigma) || !non_negative(self.weekend_factor) {
            return Err(invalid("noise_sigma and weekend_factor must be non-negative"));
        }
        if self.days == 0 {
            return Err(invalid("days must be positive"));
        }
        if g.country.len() != 2 {
            return Err(invalid("country code must have two characters"));
        }
        if g.columns == 0 || !g.columns.is_multiple_of(4) || g.rows == 0 || !g.rows.is_multiple_of(2) || g.columns / 4 > 9 || g.rows / 2 > 9 {
            return Err(invalid("grid needs columns a multiple of 4 (at most 36) and even rows (at most 18)"));
        }
        if !(g.spacing_km > 0.0 && g.self_distance_km > 0.0 && g.metro_gap_km >= 0.0) {
            return Err(invalid("distances must be positive"));
        }
        let n = (g.columns * g.rows) as usize;
        match &g.populations {
            Some(p) if p.len() != n => return Err(invalid(format!("expected {n} populations, found {}", p.len()))),
            Some(p) if p.iter().any(|v| !positive(*v)) => return Err(invalid("populations must be positive")),
            None if !(g.population_range[0] > 0.0 && g.population_range[1] >= g.population_range[0]) => {
                return Err(invalid("population_range must be positive and ordered"))
            }
            _ => {}
        }
        if self.modulation.iter().any(|m| !non_negative(m.factor) || m.from > m.to) {
            return Err(invalid("modulation needs a non-negative factor and from <= to"));
        }
        let mut ids = BTreeSet::new();
        for p in &self.providers {
            if !ids.insert(&p.provider_id) {
                return Err(invalid(format!("duplicate provider {}", p.provider_id)));
            }
            if p.block[0] == 0 || p.block[1] == 0 || p.offset[0] >= p.block[0] || p.offset[1] >= p.block[1] {
                return Err(invalid(format!("provider {}: offset must be smaller than a non-empty block", p.provider_id)));
            }
            if p.zone_prefix.is_empty() {
                return Err(invalid(format!("provider {}: empty zone prefix", p.provider_id)));
            }
            if !(p.market_share > 0.0 && p.market_share <= 1.0) {
                return Err(invalid(format!("provider {}: market share must be in (0, 1]", p.provider_id)));
            }
            p.profile().validate().map_err(|e| invalid(format!("provider {}: {e}", p.provider_id)))?;
        }
        Ok(())
    }
}

/// Expected flow before modulation and noise.
pub fn gravity_flow(scale: f64, pop_i: f64, pop_j: f64, distance: f64, decay: f64) -> f64 {
    scale * pop_i * pop_j / distance.powf(decay)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Atom {
    pub col: u32,
    pub row: u32,
    /// Position in km.
    pub x: f64,
    pub y: f64,
    pub population: f64,
    pub nuts3: String,
    /// 0 for the western metro, 1 for the eastern.
    pub metro: usize,
}

/// One provider's view of the scenario.
#[derive(Clone, Debug)]
pub struct ProviderOutput {
    pub spec: ProviderSpec,
    pub profile: ProviderProfile,
    pub crosswalk: ZoneCrosswalk,
    /// Provider zone code for every atom.
    pub zone_of_atom: Vec<Arc<str>>,
    /// Emitted rows, already threshold-suppressed.
    pub cells: Vec<OdmCell>,
}

impl ProviderOutput {
    pub fn feed(&self) -> Result<CanonicalFeed> {
        Ok(canonicalize(self.cells.clone(), &self.profile)?)
    }

    /// Writes the feed in the provider's own CSV layout.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        let fields = ["origin", "destination", "window_start", "count"];
        w.write_record(fields.map(|f| self.profile.column(f)))?;
        for c in &self.cells {
            w.write_record([&*c.origin.code, &*c.destination.code, &format_timestamp(c.window.start), &c.count.to_string()])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Scenario {
    pub spec: ScenarioSpec,
    pub registry: ZoneRegistry,
    pub atoms: Vec<Atom>,
    pub dates: Vec<NaiveDate>,
    /// Per day, row-major `n x n` true flows between atoms.
    pub truth: Vec<Vec<f64>>,
    pub providers: Vec<ProviderOutput>,
}

/// Hour-of-day share of daily trips: a night trough with morning and
/// evening peaks.
fn diurnal_profile() -> [f64; 24] {
    let mut w = [0.0; 24];
    for (h, v) in w.iter_mut().enumerate() {
        let h = h as f64 + 0.5;
        *v = 0.15 + (-(h - 8.0).powi(2) / 4.0).exp() + 0.8 * (-(h - 17.5).powi(2) / 6.0).exp() + if (10.0..16.0).contains(&h) { 0.4 } else { 0.0 };
    }
    let total: f64 = w.iter().sum();
    w.map(|v| v / total)
}

/// Share of the day falling in each window of `minutes`.
fn window_shares(minutes: u32) -> Vec<f64> {
    let hourly = diurnal_profile();
    let n = (MINUTES_PER_DAY / minutes) as usize;
    (0..n)
        .map(|k| {
            let (a, b) = (k as u32 * minutes, (k as u32 + 1) * minutes);
            (0..24u32).map(|h| hourly[h as usize] * overlap(h * 60, h * 60 + 60, a, b) as f64 / 60.0).sum()
        })
        .collect()
}

fn overlap(a0: u32, a1: u32, b0: u32, b1: u32) -> u32 {
    a1.min(b1).saturating_sub(a0.max(b0))
}

impl Scenario {
    pub fn n_atoms(&self) -> usize {
        self.atoms.len()
    }

    pub fn provider(&self, id: &str) -> Option<&ProviderOutput> {
        self.providers.iter().find(|p| p.spec.provider_id == id)
    }

    /// Ground truth aggregated to reference zones at `level`, one ODM per day,
    /// under the provider id `truth`.
    pub fn truth_odms(&self, level: u8) -> Result<Vec<HarmonizedOdm>> {
        let n = self.n_atoms();
        self.dates
            .iter()
            .zip(&self.truth)
            .map(|(&day, flows)| {
                let mut odm = HarmonizedOdm::new(day, "truth", 3);
                for i in 0..n {
                    for j in 0..n {
                        if flows[i * n + j] > 0.0 {
                            odm.add(&self.atoms[i].nuts3, &self.atoms[j].nuts3, flows[i * n + j]);
                        }
                    }
                }
                Ok(odm.roll_up(&self.registry, level)?)
            })
            .collect()
    }

    /// Zones of provider `id` lying wholly inside each metro.
    pub fn planted_metros(&self, id: &str) -> Option<[BTreeSet<String>; 2]> {
        let p = self.provider(id)?;
        let mut metros_of: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
        for (a, z) in self.atoms.iter().zip(&p.zone_of_atom) {
            metros_of.entry(z).or_default().insert(a.metro);
        }
        let mut out = [BTreeSet::new(), BTreeSet::new()];
        for (z, m) in metros_of {
            if m.len() == 1 {
                out[*m.first().expect("non-empty")].insert(z.to_string());
            }
        }
        Some(out)
    }

    /// Atom squares gathered per provider zone, as WKT.
    pub fn zone_wkt(&self, id: &str) -> Option<BTreeMap<String, String>> {
        let p = self.provider(id)?;
        let g = &self.spec.geography;
        let (lon0, lat0) = (g.origin_lonlat[0], g.origin_lonlat[1]);
        let km_lat = 1.0 / 111.32;
        let km_lon = km_lat / lat0.to_radians().cos();
        let mut polys: BTreeMap<String, Vec<String>> = BTreeMap::new();
        for (a, z) in self.atoms.iter().zip(&p.zone_of_atom) {
            let h = g.spacing_km / 2.0;
            let corners = [(-h, -h), (h, -h), (h, h), (-h, h), (-h, -h)]
                .map(|(dx, dy)| format!("{:.6} {:.6}", lon0 + (a.x + dx) * km_lon, lat0 + (a.y + dy) * km_lat));
            polys.entry(z.to_string()).or_default().push(format!("(({}))", corners.join(",")));
        }
        Some(polys.into_iter().map(|(z, p)| (z, format!("MULTIPOLYGON({})", p.join(",")))).collect())
    }

    /// Writes the scenario layout:
    ///
    /// ```text
    /// scenario.toml  zones.csv  crosswalks.csv  truth.csv  planted_metros.csv
    /// profiles/<provider>.toml  feeds/<provider>.csv  geometry/<provider>.csv
    /// ```
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        for sub in ["profiles", "feeds", "geometry"] {
            create_dir(&dir.join(sub))?;
        }
        let file = |rel: &str| -> Result<std::io::BufWriter<std::fs::File>> {
            let path = dir.join(rel);
            let f = std::fs::File::create(&path).map_err(|source| SynthError::Io { path, source })?;
            Ok(std::io::BufWriter::new(f))
        };
        let io = |rel: &str| {
            let path = dir.join(rel);
            move |source| SynthError::Io { path, source }
        };
        file("scenario.toml")?.write_all(self.spec.to_toml_string().as_bytes()).map_err(io("scenario.toml"))?;
        self.registry.write(file("zones.csv")?)?;

        let mut xw = csv::Writer::from_writer(file("crosswalks.csv")?);
        xw.write_record(["zoning_id", "zone_code", "nuts3_code", "weight"])?;
        for p in &self.providers {
            for (zone, weights) in &p.crosswalk.entries {
                for (nuts, w) in weights {
                    xw.write_record([p.crosswalk.zoning_id.as_str(), zone, nuts, &w.to_string()])?;
                }
            }
        }
        xw.flush().map_err(io("crosswalks.csv"))?;

        for p in &self.providers {
            let id = &p.spec.provider_id;
            let rel = format!("profiles/{id}.toml");
            file(&rel)?.write_all(p.profile.to_toml_string().as_bytes()).map_err(io(&rel))?;
            p.write_csv(file(&format!("feeds/{id}.csv"))?)?;
            let mut gw = csv::Writer::from_writer(file(&format!("geometry/{id}.csv"))?);
            gw.write_record(["zone_code", "wkt"])?;
            for (z, wkt) in self.zone_wkt(id).expect("provider exists") {
                gw.write_record([z, wkt])?;
            }
            gw.flush().map_err(io("geometry"))?;
        }

        let mut mw = csv::Writer::from_writer(file("planted_metros.csv")?);
        mw.write_record(["provider_id", "metro", "zone_code"])?;
        for p in &self.providers {
            let id = &p.spec.provider_id;
            for (m, zones) in self.planted_metros(id).expect("provider exists").iter().enumerate() {
                for z in zones {
                    mw.write_record([id.as_str(), &(m + 1).to_string(), z])?;
                }
            }
        }
        mw.flush().map_err(io("planted_metros.csv"))?;

        let mut tw = csv::Writer::from_writer(file("truth.csv")?);
        tw.write_record(["date", "origin", "destination", "count"])?;
        for odm in self.truth_odms(3)? {
            let date = odm.day.to_string();
            for ((o, d), c) in &odm.cells {
                tw.write_record([date.as_str(), o, d, &format!("{c:.3}")])?;
            }
        }
        tw.flush().map_err(io("truth.csv"))?;
        Ok(())
    }
}

fn create_dir(path: &Path) -> Result<()> {
    std::fs::create_dir_all(path).map_err(|source| SynthError::Io { path: path.into(), source })
}

fn round_half_even(x: f64) -> f64 {
    x.round_ties_even()
}

pub fn generate_scenario(spec: &ScenarioSpec) -> Result<Scenario> {
    spec.validate()?;
    let g = &spec.geography;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = (g.columns * g.rows) as usize;
    let populations: Vec<f64> = match &g.populations {
        Some(p) => p.clone(),
        None => {
            let u = Uniform::new_inclusive(g.population_range[0], g.population_range[1]).map_err(|e| invalid(e.to_string()))?;
            (0..n).map(|_| u.sample(&mut rng).round()).collect()
        }
    };

    let half = g.columns / 2;
    let atoms: Vec<Atom> = (0..n as u32)
        .map(|a| {
            let (col, row) = (a % g.columns, a / g.columns);
            let metro = usize::from(col >= half);
            let x = col as f64 * g.spacing_km + if metro == 1 { g.metro_gap_km } else { 0.0 };
            let (bx, by) = ((col % half) / 2, row / 2);
            let nuts3 = format!("{}{}{}{}", g.country, metro + 1, by + 1, bx + 1);
            Atom { col, row, x, y: row as f64 * g.spacing_km, population: populations[a as usize], nuts3, metro }
        })
        .collect();
    let codes: BTreeSet<&str> = atoms.iter().map(|a| a.nuts3.as_str()).collect();
    let registry = ZoneRegistry::from_nuts3_codes(codes.into_iter().map(|c| (c, None)))?;

    let base: Vec<f64> = (0..n * n)
        .map(|k| {
            let (a, b) = (&atoms[k / n], &atoms[k % n]);
            let d = if k / n == k % n { g.self_distance_km } else { (a.x - b.x).hypot(a.y - b.y) };
            gravity_flow(spec.gravity.scale, a.population, b.population, d, spec.gravity.distance_decay)
        })
        .collect();

    let noise = if spec.noise_sigma > 0.0 {
        Some(LogNormal::new(0.0, spec.noise_sigma).map_err(|e| invalid(e.to_string()))?)
    } else {
        None
    };
    let dates: Vec<NaiveDate> = spec.start.iter_days().take(spec.days as usize).collect();
    let truth: Vec<Vec<f64>> = dates
        .iter()
        .map(|&day| {
            let weekend = matches!(day.weekday(), Weekday::Sat | Weekday::Sun);
            let day_factor = if weekend { spec.weekend_factor } else { 1.0 };
            let origin_factor: Vec<f64> = atoms
                .iter()
                .map(|a| {
                    spec.modulation
                        .iter()
                        .filter(|m| m.from <= day && day <= m.to && m.region.as_deref().is_none_or(|r| a.nuts3.starts_with(r)))
                        .map(|m| m.factor)
                        .product::<f64>()
                        * day_factor
                })
                .collect();
            (0..n * n)
                .map(|k| {
                    let eps = noise.as_ref().map_or(1.0, |d| d.sample(&mut rng));
                    base[k] * origin_factor[k / n] * eps
                })
                .collect()
        })
        .collect();

    let providers = spec.providers.iter().map(|p| emit_provider(p, &atoms, &registry, &dates, &truth)).collect::<Result<_>>()?;
    Ok(Scenario { spec: spec.clone(), registry, atoms, dates, truth, providers })
}

fn emit_provider(
    spec: &ProviderSpec,
    atoms: &[Atom],
    registry: &ZoneRegistry,
    dates: &[NaiveDate],
    truth: &[Vec<f64>],
) -> Result<ProviderOutput> {
    let profile = spec.profile();
    let zoning: Arc<str> = Arc::from(profile.zoning_id.as_str());
    let mut codes: BTreeMap<(u32, u32), Arc<str>> = BTreeMap::new();
    let zone_of_atom: Vec<Arc<str>> = atoms
        .iter()
        .map(|a| {
            let (bx, by) = spec.block_of(a.col, a.row);
            codes.entry((bx, by)).or_insert_with(|| Arc::from(format!("{}{bx:02}{by:02}", spec.zone_prefix))).clone()
        })
        .collect();

    // area-share crosswalk
    let mut entries: BTreeMap<String, BTreeMap<String, f64>> = BTreeMap::new();
    for (a, z) in atoms.iter().zip(&zone_of_atom) {
        *entries.entry(z.to_string()).or_default().entry(a.nuts3.clone()).or_insert(0.0) += 1.0;
    }
    let entries = entries.into_iter().map(|(z, m)| {
        let total: f64 = m.values().sum();
        (z, m.into_iter().map(|(k, v)| (k, v / total)).collect())
    });
    let crosswalk = ZoneCrosswalk::new(profile.zoning_id.clone(), entries.collect())?;
    debug_assert!(crosswalk.entries.values().flatten().all(|(c, _)| registry.get(c).is_some()));

    let zones: Vec<Arc<str>> = codes.into_values().collect::<BTreeSet<_>>().into_iter().collect();
    let index: Vec<usize> = zone_of_atom.iter().map(|z| zones.binary_search(z).expect("collected")).collect();
    let nz = zones.len();
    let n = atoms.len();
    let shares = window_shares(spec.window_minutes);
    let k = f64::from(spec.threshold_k);
    let ms = spec.market_share;

    let mut cells = Vec::new();
    for (day, flows) in dates.iter().zip(truth) {
        let mut zf = vec![0.0; nz * nz];
        for i in 0..n {
            for j in 0..n {
                zf[index[i] * nz + index[j]] += flows[i * n + j];
            }
        }
        let midnight = day.and_hms_opt(0, 0, 0).expect("midnight");
        for (w, share) in shares.iter().enumerate() {
            let window = TimeWindow::new(midnight + Duration::minutes((w as u32 * spec.window_minutes) as i64), spec.window_minutes)
                .expect("windows tile the day");
            for zi in 0..nz {
                for zj in 0..nz {
                    let devices = round_half_even(zf[zi * nz + zj] * ms * share);
                    let count = if spec.extrapolated { round_half_even(devices / ms) } else { devices };
                    if count >= k && count > 0.0 {
                        cells.push(OdmCell {
                            origin: ZoneId { scope: zoning.clone(), code: zones[zi].clone() },
                            destination: ZoneId { scope: zoning.clone(), code: zones[zj].clone() },
                            window,
                            count,
                            attributes: Attributes::default(),
                        });
                    }
                }
            }
        }
    }
    Ok(ProviderOutput { spec: spec.clone(), profile, crosswalk, zone_of_atom, cells })
}
