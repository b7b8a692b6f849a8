//! Harmonisation onto a shared reference zoning and a shared time grid.
//!
//! Provider zones are mapped onto NUTS-style level-3 reference zones through an
//! explicit weighted crosswalk, then rolled up the hierarchy by parent links.
//! Time is re-binned into UTC calendar days or ISO weeks. Providers are never
//! summed together: each provider stays a separate series.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use chrono::{Datelike, Duration, NaiveDate};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ingest::{
    merge_sorted, Attributes, CanonicalFeed, Interner, OdmCell, ProviderProfile, Resolution, StopTime, TimeWindow,
    ZoneId, MINUTES_PER_DAY,
};
use crate::time::{parse_date, DayClass};

/// Tolerance on crosswalk weight sums.
pub const WEIGHT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, thiserror::Error)]
pub enum HarmoniseError {
    #[error("cannot read {path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("invalid reference zone registry: {0}")]
    Registry(String),
    #[error("feed zoning `{feed}` does not match crosswalk zoning `{crosswalk}`")]
    ZoningMismatch { feed: String, crosswalk: String },
    #[error("zones without a crosswalk entry: {}", .0.join(", "))]
    UnmappedZone(Vec<String>),
    #[error("bad crosswalk weights for zone `{zone}`: {detail}")]
    BadWeights { zone: String, detail: String },
    #[error("reference zone `{0}` is not a level-3 zone of the registry")]
    UnknownReferenceZone(String),
    #[error("reference level {0} is outside 0..=3")]
    InvalidLevel(u8),
    #[error("a {0}-minute window does not divide the target bin")]
    NonDivisibleWindow(u32),
    #[error("feed is already extrapolated to the total population")]
    AlreadyExtrapolated,
    #[error("profile has no market share")]
    MissingMarketShare,
    #[error("feed `{provider}` is not ready for harmonisation: {reason}")]
    NotHarmonisable { provider: String, reason: String },
    #[error("level {requested} requested but data is only available at level {available}")]
    LevelUnavailable { requested: u8, available: u8 },
}

pub type Result<T, E = HarmoniseError> = std::result::Result<T, E>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> HarmoniseError + '_ {
    move |source| HarmoniseError::Io { path: path.into(), source }
}

/// Zoning name used for reference zones at a level.
pub fn reference_scope(level: u8) -> String {
    format!("NUTS{level}")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefZone {
    pub nuts_code: String,
    pub level: u8,
    pub parent: Option<String>,
    pub population: Option<u64>,
}

/// Validated NUTS-style hierarchy, levels 0 (country) to 3.
#[derive(Clone, Debug, Default)]
pub struct ZoneRegistry {
    zones: BTreeMap<String, RefZone>,
}

impl ZoneRegistry {
    pub fn new(zones: impl IntoIterator<Item = RefZone>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for z in zones {
            if z.nuts_code.is_empty() {
                return Err(HarmoniseError::Registry("empty nuts_code".into()));
            }
            if z.level > 3 {
                return Err(HarmoniseError::InvalidLevel(z.level));
            }
            if let Some(prev) = map.insert(z.nuts_code.clone(), z) {
                return Err(HarmoniseError::Registry(format!("duplicate zone {}", prev.nuts_code)));
            }
        }
        for z in map.values() {
            match (&z.parent, z.level) {
                (None, 0) => {}
                (Some(_), 0) => return Err(HarmoniseError::Registry(format!("level-0 zone {} has a parent", z.nuts_code))),
                (None, _) => return Err(HarmoniseError::Registry(format!("zone {} has no parent", z.nuts_code))),
                (Some(p), level) => {
                    let parent = map
                        .get(p)
                        .ok_or_else(|| HarmoniseError::Registry(format!("parent {p} of {} is missing", z.nuts_code)))?;
                    if parent.level + 1 != level {
                        return Err(HarmoniseError::Registry(format!("parent {p} of {} is not one level up", z.nuts_code)));
                    }
                    if !z.nuts_code.starts_with(p.as_str()) || z.nuts_code.len() <= p.len() {
                        return Err(HarmoniseError::Registry(format!("code {} does not extend parent {p}", z.nuts_code)));
                    }
                }
            }
        }
        Ok(Self { zones: map })
    }

    /// Derives the full hierarchy from level-3 codes using NUTS code lengths
    /// (country 2 characters, then one character per level).
    pub fn from_nuts3_codes<'a>(codes: impl IntoIterator<Item = (&'a str, Option<u64>)>) -> Result<Self> {
        let mut zones: BTreeMap<String, RefZone> = BTreeMap::new();
        for (code, population) in codes {
            if code.len() != 5 {
                return Err(HarmoniseError::Registry(format!("{code} is not a 5-character level-3 code")));
            }
            for level in 0..=3u8 {
                let c = &code[..2 + level as usize];
                let parent = (level > 0).then(|| code[..1 + level as usize].to_string());
                let entry = zones.entry(c.to_string()).or_insert(RefZone {
                    nuts_code: c.to_string(),
                    level,
                    parent,
                    population: Some(0),
                });
                entry.population = match (entry.population, population) {
                    (Some(a), Some(b)) => Some(a + b),
                    _ => None,
                };
            }
        }
        Self::new(zones.into_values())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(io_err(path))?;
        Self::read(file)
    }

    /// Reads the `nuts_code,level,parent,population` CSV layout.
    pub fn read<R: Read>(reader: R) -> Result<Self> {
        #[derive(Deserialize)]
        struct Row {
            nuts_code: String,
            level: u8,
            parent: Option<String>,
            population: Option<u64>,
        }
        let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
        let mut zones = Vec::new();
        for row in rdr.deserialize() {
            let r: Row = row?;
            zones.push(RefZone {
                nuts_code: r.nuts_code,
                level: r.level,
                parent: r.parent.filter(|p| !p.is_empty()),
                population: r.population,
            });
        }
        Self::new(zones)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["nuts_code", "level", "parent", "population"])?;
        for z in self.zones.values() {
            w.write_record([
                z.nuts_code.clone(),
                z.level.to_string(),
                z.parent.clone().unwrap_or_default(),
                z.population.map(|p| p.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush().map_err(|source| HarmoniseError::Io { path: "<writer>".into(), source })?;
        Ok(())
    }

    pub fn get(&self, code: &str) -> Option<&RefZone> {
        self.zones.get(code)
    }

    pub fn zones(&self) -> impl Iterator<Item = &RefZone> {
        self.zones.values()
    }

    pub fn at_level(&self, level: u8) -> impl Iterator<Item = &RefZone> {
        self.zones.values().filter(move |z| z.level == level)
    }

    pub fn parent_of(&self, code: &str) -> Option<&str> {
        self.zones.get(code)?.parent.as_deref()
    }

    /// Ancestor of `code` at `level` (the zone itself at its own level).
    pub fn ancestor<'a>(&'a self, code: &'a str, level: u8) -> Option<&'a str> {
        let mut z = self.zones.get(code)?;
        if z.level < level {
            return None;
        }
        while z.level > level {
            z = self.zones.get(z.parent.as_deref()?)?;
        }
        Some(z.nuts_code.as_str())
    }
}

/// Weighted mapping from one provider zoning onto level-3 reference zones.
#[derive(Clone, Debug, PartialEq)]
pub struct ZoneCrosswalk {
    pub zoning_id: String,
    /// Provider zone code -> (level-3 code, weight), weights summing to one.
    pub entries: BTreeMap<String, Vec<(String, f64)>>,
}

impl ZoneCrosswalk {
    /// Validates weights: each in (0, 1], and each zone's weights sum to one
    /// within [`WEIGHT_TOLERANCE`]. Sums are then renormalised to one.
    pub fn new(zoning_id: impl Into<String>, entries: BTreeMap<String, Vec<(String, f64)>>) -> Result<Self> {
        let mut entries = entries;
        for (zone, targets) in entries.iter_mut() {
            if targets.is_empty() {
                return Err(HarmoniseError::BadWeights { zone: zone.clone(), detail: "no targets".into() });
            }
            if let Some((t, w)) = targets.iter().find(|(_, w)| !(*w > 0.0 && *w <= 1.0)) {
                return Err(HarmoniseError::BadWeights { zone: zone.clone(), detail: format!("weight {w} for {t} outside (0, 1]") });
            }
            let sum: f64 = targets.iter().map(|(_, w)| w).sum();
            if (sum - 1.0).abs() > WEIGHT_TOLERANCE {
                return Err(HarmoniseError::BadWeights { zone: zone.clone(), detail: format!("weights sum to {sum}") });
            }
            targets.sort_by(|a, b| a.0.cmp(&b.0));
            for pair in targets.windows(2) {
                if pair[0].0 == pair[1].0 {
                    return Err(HarmoniseError::BadWeights { zone: zone.clone(), detail: format!("duplicate target {}", pair[0].0) });
                }
            }
            for t in targets.iter_mut() {
                t.1 /= sum;
            }
        }
        Ok(Self { zoning_id: zoning_id.into(), entries })
    }

    /// One-to-one crosswalk (each zone maps entirely onto itself).
    pub fn identity<'a>(zoning_id: &str, codes: impl IntoIterator<Item = &'a str>) -> Self {
        let entries = codes.into_iter().map(|c| (c.to_string(), vec![(c.to_string(), 1.0)])).collect();
        Self { zoning_id: zoning_id.to_string(), entries }
    }

    pub fn weights(&self, zone: &str) -> Option<&[(String, f64)]> {
        self.entries.get(zone).map(Vec::as_slice)
    }

    pub fn write<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["zoning_id", "zone_code", "nuts3_code", "weight"])?;
        for (zone, targets) in &self.entries {
            for (t, weight) in targets {
                w.write_record([self.zoning_id.as_str(), zone, t, &weight.to_string()])?;
            }
        }
        w.flush().map_err(|source| HarmoniseError::Io { path: "<writer>".into(), source })?;
        Ok(())
    }
}

/// Reads the `zoning_id,zone_code,nuts3_code,weight` layout. One file may
/// hold several zonings.
pub fn read_crosswalks<R: Read>(reader: R) -> Result<BTreeMap<String, ZoneCrosswalk>> {
    #[derive(Deserialize)]
    struct Row {
        zoning_id: String,
        zone_code: String,
        nuts3_code: String,
        weight: f64,
    }
    let mut grouped: BTreeMap<String, BTreeMap<String, Vec<(String, f64)>>> = BTreeMap::new();
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    for row in rdr.deserialize() {
        let r: Row = row?;
        grouped.entry(r.zoning_id).or_default().entry(r.zone_code).or_default().push((r.nuts3_code, r.weight));
    }
    grouped.into_iter().map(|(z, entries)| Ok((z.clone(), ZoneCrosswalk::new(z, entries)?))).collect()
}

pub fn load_crosswalks(path: impl AsRef<Path>) -> Result<BTreeMap<String, ZoneCrosswalk>> {
    let path = path.as_ref();
    read_crosswalks(std::fs::File::open(path).map_err(io_err(path))?)
}

fn check_level(level: u8) -> Result<()> {
    if level > 3 {
        Err(HarmoniseError::InvalidLevel(level))
    } else {
        Ok(())
    }
}

/// Sums cells sharing a key and returns them in canonical order.
fn accumulate(cells: impl Iterator<Item = OdmCell>) -> Vec<OdmCell> {
    let mut acc: HashMap<(TimeWindow, ZoneId, ZoneId, Attributes), f64> = HashMap::new();
    for c in cells {
        *acc.entry((c.window, c.origin, c.destination, c.attributes)).or_insert(0.0) += c.count;
    }
    merge_sorted(
        acc.into_iter()
            .map(|((window, origin, destination, attributes), count)| OdmCell { origin, destination, window, count, attributes })
            .collect(),
    )
}

/// Maps a provider feed onto reference zones at `level`.
///
/// Each cell fans out to level-3 pairs with weight `w(o->O) * w(d->D)`, then
/// rolls up one level at a time to `level`.
pub fn map_zones(feed: &CanonicalFeed, xwalk: &ZoneCrosswalk, registry: &ZoneRegistry, level: u8) -> Result<CanonicalFeed> {
    check_level(level)?;
    if feed.meta.zoning != xwalk.zoning_id {
        return Err(HarmoniseError::ZoningMismatch { feed: feed.meta.zoning.clone(), crosswalk: xwalk.zoning_id.clone() });
    }
    let mut unmapped: Vec<String> = feed
        .zones()
        .into_iter()
        .filter(|z| !xwalk.entries.contains_key(&**z))
        .map(|z| z.to_string())
        .collect();
    if !unmapped.is_empty() {
        unmapped.dedup();
        return Err(HarmoniseError::UnmappedZone(unmapped));
    }

    let scope3: Arc<str> = Arc::from(reference_scope(3));
    let mut interner = Interner::default();
    let mut lookup: HashMap<&str, Vec<(ZoneId, f64)>> = HashMap::new();
    for (zone, targets) in &xwalk.entries {
        let mut mapped = Vec::with_capacity(targets.len());
        for (t, w) in targets {
            match registry.get(t) {
                Some(z) if z.level == 3 => {}
                _ => return Err(HarmoniseError::UnknownReferenceZone(t.clone())),
            }
            mapped.push((ZoneId { scope: scope3.clone(), code: interner.get(t) }, *w));
        }
        lookup.insert(zone.as_str(), mapped);
    }

    let fanned = accumulate(feed.cells.iter().flat_map(|c| {
        let from = &lookup[&*c.origin.code];
        let to = &lookup[&*c.destination.code];
        from.iter().flat_map(move |(o, wo)| {
            to.iter().map(move |(d, wd)| OdmCell {
                origin: o.clone(),
                destination: d.clone(),
                window: c.window,
                count: c.count * wo * wd,
                attributes: c.attributes.clone(),
            })
        })
    }));

    let mut meta = feed.meta.clone();
    meta.zoning = reference_scope(3);
    meta.reference_level = Some(3);
    let mut out = CanonicalFeed { meta, cells: fanned };
    for l in (level..3).rev() {
        out = roll_up_feed(&out, registry, l)?;
    }
    Ok(out)
}

/// Rolls a reference-zoned feed up by exactly one level, to `level`.
fn roll_up_feed(feed: &CanonicalFeed, registry: &ZoneRegistry, level: u8) -> Result<CanonicalFeed> {
    let scope: Arc<str> = Arc::from(reference_scope(level));
    let mut parents: HashMap<Arc<str>, ZoneId> = HashMap::new();
    for z in feed.zones() {
        let p = registry.parent_of(&z).ok_or_else(|| HarmoniseError::UnknownReferenceZone(z.to_string()))?;
        parents.insert(z, ZoneId { scope: scope.clone(), code: Arc::from(p) });
    }
    let cells = accumulate(feed.cells.iter().map(|c| OdmCell {
        origin: parents[&c.origin.code].clone(),
        destination: parents[&c.destination.code].clone(),
        window: c.window,
        count: c.count,
        attributes: c.attributes.clone(),
    }));
    let mut meta = feed.meta.clone();
    meta.zoning = scope.to_string();
    meta.reference_level = Some(level);
    Ok(CanonicalFeed { meta, cells })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TimeTarget {
    Daily,
    Weekly,
}

/// Weekly sub-bin window for a day: Monday 00:00 for five weekdays, or
/// Saturday 00:00 for the weekend.
pub fn weekly_bin(day: NaiveDate) -> TimeWindow {
    let monday = day - Duration::days(day.weekday().num_days_from_monday() as i64);
    let (start, minutes) = match DayClass::of(day) {
        DayClass::Weekday => (monday, 5 * MINUTES_PER_DAY),
        DayClass::Weekend => (monday + Duration::days(5), 2 * MINUTES_PER_DAY),
    };
    TimeWindow { start: start.and_hms_opt(0, 0, 0).expect("midnight exists"), minutes }
}

/// Sums cells into UTC calendar days, or into ISO-week weekday/weekend bins.
pub fn rebin_time(feed: &CanonicalFeed, target: TimeTarget) -> Result<CanonicalFeed> {
    match (feed.meta.resolution, target) {
        (Resolution::Window(m), _) if m == 0 || !MINUTES_PER_DAY.is_multiple_of(m) => return Err(HarmoniseError::NonDivisibleWindow(m)),
        (Resolution::Daily, TimeTarget::Daily) | (Resolution::Weekly, TimeTarget::Weekly) => return Ok(feed.clone()),
        (Resolution::Weekly, TimeTarget::Daily) => return Err(HarmoniseError::NonDivisibleWindow(7 * MINUTES_PER_DAY)),
        _ => {}
    }
    let bin = |w: &TimeWindow| match target {
        TimeTarget::Daily => TimeWindow::daily(w.day()),
        TimeTarget::Weekly => weekly_bin(w.day()),
    };
    let cells = accumulate(feed.cells.iter().map(|c| OdmCell { window: bin(&c.window), ..c.clone() }));
    let mut meta = feed.meta.clone();
    meta.resolution = match target {
        TimeTarget::Daily => Resolution::Daily,
        TimeTarget::Weekly => Resolution::Weekly,
    };
    Ok(CanonicalFeed { meta, cells })
}

/// Scales device counts up to the total population by `1 / market_share`.
pub fn extrapolate(feed: &CanonicalFeed, profile: &ProviderProfile) -> Result<CanonicalFeed> {
    if feed.meta.extrapolated || profile.extrapolated {
        return Err(HarmoniseError::AlreadyExtrapolated);
    }
    let share = profile.market_share.ok_or(HarmoniseError::MissingMarketShare)?;
    let factor = 1.0 / share;
    let mut out = feed.clone();
    for c in &mut out.cells {
        c.count *= factor;
    }
    out.meta.extrapolated = true;
    out.meta.market_share = Some(share);
    Ok(out)
}

/// One provider's daily ODM on reference zones.
#[derive(Clone, Debug, PartialEq)]
pub struct HarmonizedOdm {
    pub day: NaiveDate,
    pub provider_id: String,
    pub level: u8,
    /// (origin code, destination code) -> count.
    pub cells: BTreeMap<(Arc<str>, Arc<str>), f64>,
    pub provenance: Vec<String>,
    pub stop_time: Option<StopTime>,
}

impl HarmonizedOdm {
    pub fn new(day: NaiveDate, provider_id: impl Into<String>, level: u8) -> Self {
        let provider_id = provider_id.into();
        Self { day, provenance: vec![provider_id.clone()], provider_id, level, cells: BTreeMap::new(), stop_time: None }
    }

    pub fn add(&mut self, origin: &str, destination: &str, count: f64) {
        *self.cells.entry((Arc::from(origin), Arc::from(destination))).or_insert(0.0) += count;
    }

    /// Total of all unmasked cells.
    pub fn total(&self) -> f64 {
        self.cells.values().filter(|c| !c.is_nan()).sum()
    }

    /// Rolls up to a coarser `level`, one level at a time.
    pub fn roll_up(&self, registry: &ZoneRegistry, level: u8) -> Result<HarmonizedOdm> {
        check_level(level)?;
        if level > self.level {
            return Err(HarmoniseError::LevelUnavailable { requested: level, available: self.level });
        }
        let mut current = self.clone();
        while current.level > level {
            let mut parents: HashMap<&str, Arc<str>> = HashMap::new();
            for (o, d) in current.cells.keys() {
                for z in [o, d] {
                    if !parents.contains_key(&**z) {
                        let p = registry.parent_of(z).ok_or_else(|| HarmoniseError::UnknownReferenceZone(z.to_string()))?;
                        parents.insert(z, Arc::from(p));
                    }
                }
            }
            let mut next = BTreeMap::new();
            for ((o, d), c) in &current.cells {
                *next.entry((parents[&**o].clone(), parents[&**d].clone())).or_insert(0.0) += c;
            }
            current = HarmonizedOdm { cells: next, level: current.level - 1, ..current.clone() };
        }
        Ok(current)
    }
}

/// Splits daily reference-zoned feeds into one [`HarmonizedOdm`] per
/// (day, provider), rolled up to `level`. Attribute-bearing cells are a
/// separate population and are left out.
pub fn build_harmonized(feeds: &[CanonicalFeed], registry: &ZoneRegistry, level: u8) -> Result<Vec<HarmonizedOdm>> {
    check_level(level)?;
    let per_feed: Vec<Vec<HarmonizedOdm>> = feeds
        .par_iter()
        .map(|feed| {
            let not_ready = |reason: &str| HarmoniseError::NotHarmonisable {
                provider: feed.meta.provider_id.clone(),
                reason: reason.to_string(),
            };
            let available = feed.meta.reference_level.ok_or_else(|| not_ready("not mapped onto reference zones"))?;
            if feed.meta.resolution != Resolution::Daily {
                return Err(not_ready("not binned to calendar days"));
            }
            if level > available {
                return Err(HarmoniseError::LevelUnavailable { requested: level, available });
            }
            let mut days: BTreeMap<NaiveDate, HarmonizedOdm> = BTreeMap::new();
            for c in feed.cells.iter().filter(|c| c.attributes.is_empty()) {
                let odm = days.entry(c.window.day()).or_insert_with(|| {
                    let mut h = HarmonizedOdm::new(c.window.day(), feed.meta.provider_id.clone(), available);
                    h.stop_time = Some(feed.meta.stop_time);
                    h
                });
                *odm.cells.entry((c.origin.code.clone(), c.destination.code.clone())).or_insert(0.0) += c.count;
            }
            days.into_values().map(|h| h.roll_up(registry, level)).collect()
        })
        .collect::<Result<_>>()?;
    let mut out: Vec<HarmonizedOdm> = per_feed.into_iter().flatten().collect();
    out.sort_by(|a, b| (a.day, &a.provider_id).cmp(&(b.day, &b.provider_id)));
    Ok(out)
}

/// Text used for masked counts in files.
pub const MASKED_TEXT: &str = "masked";

pub fn format_count(c: f64) -> String {
    if c.is_nan() {
        MASKED_TEXT.to_string()
    } else {
        c.to_string()
    }
}

/// Writes ODMs in the `provider_id,date,level,origin,destination,count` layout.
pub fn write_harmonized<'a, W: Write>(odms: impl IntoIterator<Item = &'a HarmonizedOdm>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["provider_id", "date", "level", "origin", "destination", "count"])?;
    for odm in odms {
        let day = odm.day.to_string();
        let level = odm.level.to_string();
        for ((o, d), c) in &odm.cells {
            w.write_record([odm.provider_id.as_str(), &day, &level, o, d, &format_count(*c)])?;
        }
    }
    w.flush().map_err(|source| HarmoniseError::Io { path: "<writer>".into(), source })?;
    Ok(())
}

pub fn read_harmonized<R: Read>(reader: R) -> Result<Vec<HarmonizedOdm>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out: BTreeMap<(NaiveDate, String), HarmonizedOdm> = BTreeMap::new();
    let mut interner = Interner::default();
    let mut rec = csv::StringRecord::new();
    while rdr.read_record(&mut rec)? {
        let line = rec.position().map(|p| p.line()).unwrap_or(0);
        let bad = |reason: &str| HarmoniseError::Parse { line, reason: reason.to_string() };
        if rec.len() != 6 {
            return Err(bad("expected 6 fields"));
        }
        let day = parse_date(&rec[1]).map_err(|e| bad(&e.to_string()))?;
        let level: u8 = rec[2].parse().map_err(|_| bad("bad level"))?;
        check_level(level)?;
        let count = if &rec[5] == MASKED_TEXT {
            f64::NAN
        } else {
            rec[5].parse::<f64>().ok().filter(|c| c.is_finite() && *c >= 0.0).ok_or_else(|| bad("bad count"))?
        };
        let odm = out
            .entry((day, rec[0].to_string()))
            .or_insert_with(|| HarmonizedOdm::new(day, &rec[0], level));
        if odm.level != level {
            return Err(bad("mixed levels for one provider-day"));
        }
        odm.cells.insert((interner.get(&rec[3]), interner.get(&rec[4])), count);
    }
    Ok(out.into_values().collect())
}

pub fn load_harmonized(path: impl AsRef<Path>) -> Result<Vec<HarmonizedOdm>> {
    let path = path.as_ref();
    read_harmonized(std::io::BufReader::new(std::fs::File::open(path).map_err(io_err(path))?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{FeedMeta, StopTime};

    pub(crate) fn toy_registry() -> ZoneRegistry {
        // AA -> AA1 -> AA11 -> {AA111, AA112}, AA12 -> {AA121}; AA2 -> AA21 -> {AA211}
        ZoneRegistry::from_nuts3_codes(
            ["AA111", "AA112", "AA121", "AA211"].into_iter().map(|c| (c, Some(100))),
        )
        .unwrap()
    }

    fn meta(zoning: &str, resolution: Resolution) -> FeedMeta {
        FeedMeta {
            provider_id: "p".into(),
            zoning: zoning.into(),
            reference_level: None,
            resolution,
            extrapolated: false,
            market_share: Some(0.25),
            threshold_k: 1,
            stop_time: StopTime::Minutes(30),
            source_columns: vec![],
        }
    }

    fn cell(scope: &str, o: &str, d: &str, day: u32, hour: u32, count: f64) -> OdmCell {
        let start = NaiveDate::from_ymd_opt(2020, 3, day).unwrap().and_hms_opt(hour, 0, 0).unwrap();
        OdmCell {
            origin: ZoneId::new(scope, o).unwrap(),
            destination: ZoneId::new(scope, d).unwrap(),
            window: TimeWindow { start, minutes: 60 },
            count,
            attributes: Attributes::default(),
        }
    }

    fn feed(cells: Vec<OdmCell>) -> CanonicalFeed {
        CanonicalFeed { meta: meta("prov", Resolution::Window(60)), cells: merge_sorted(cells) }
    }

    fn xwalk(entries: &[(&str, &[(&str, f64)])]) -> ZoneCrosswalk {
        let e = entries
            .iter()
            .map(|(z, t)| (z.to_string(), t.iter().map(|(c, w)| (c.to_string(), *w)).collect()))
            .collect();
        ZoneCrosswalk::new("prov", e).unwrap()
    }

    fn as_map(f: &CanonicalFeed) -> BTreeMap<(String, String), f64> {
        f.cells.iter().map(|c| ((c.origin.code.to_string(), c.destination.code.to_string()), c.count)).collect()
    }

    #[test]
    fn registry_rejects_inconsistent_codes() {
        let zones = vec![
            RefZone { nuts_code: "AA".into(), level: 0, parent: None, population: None },
            RefZone { nuts_code: "BB1".into(), level: 1, parent: Some("AA".into()), population: None },
        ];
        assert!(matches!(ZoneRegistry::new(zones), Err(HarmoniseError::Registry(_))));
        let zones = vec![RefZone { nuts_code: "AA".into(), level: 0, parent: Some("A".into()), population: None }];
        assert!(ZoneRegistry::new(zones).is_err());
        let r = toy_registry();
        assert_eq!(r.ancestor("AA112", 1), Some("AA1"));
        assert_eq!(r.ancestor("AA112", 3), Some("AA112"));
        assert_eq!(r.ancestor("AA1", 3), None);
        assert_eq!(r.get("AA1").unwrap().population, Some(300));
    }

    #[test]
    fn registry_csv_round_trip() {
        let r = toy_registry();
        let mut buf = Vec::new();
        r.write(&mut buf).unwrap();
        let back = ZoneRegistry::read(buf.as_slice()).unwrap();
        assert_eq!(back.zones().count(), r.zones().count());
        assert_eq!(back.get("AA211"), r.get("AA211"));
    }

    #[test]
    fn identity_mapping() {
        let f = feed(vec![cell("prov", "a", "b", 2, 0, 100.0)]);
        let x = xwalk(&[("a", &[("AA111", 1.0)]), ("b", &[("AA112", 1.0)])]);
        let out = map_zones(&f, &x, &toy_registry(), 3).unwrap();
        assert_eq!(as_map(&out), BTreeMap::from([(("AA111".into(), "AA112".into()), 100.0)]));
        assert_eq!(out.meta.reference_level, Some(3));
    }

    #[test]
    fn weighted_fan_out() {
        let f = feed(vec![cell("prov", "a", "b", 2, 0, 100.0)]);
        let x = xwalk(&[("a", &[("AA111", 0.6), ("AA112", 0.4)]), ("b", &[("AA121", 1.0)])]);
        let out = as_map(&map_zones(&f, &x, &toy_registry(), 3).unwrap());
        assert!((out[&("AA111".into(), "AA121".into())] - 60.0).abs() < 1e-12);
        assert!((out[&("AA112".into(), "AA121".into())] - 40.0).abs() < 1e-12);
        assert_eq!(out.len(), 2);
    }

    #[test]
    fn self_flow_fans_out_to_all_pairs() {
        let f = feed(vec![cell("prov", "a", "a", 2, 0, 80.0)]);
        let x = xwalk(&[("a", &[("AA111", 0.5), ("AA112", 0.5)])]);
        let out = as_map(&map_zones(&f, &x, &toy_registry(), 3).unwrap());
        // brute force: every (O, D) pair gets 0.5 * 0.5 * 80
        for o in ["AA111", "AA112"] {
            for d in ["AA111", "AA112"] {
                assert_eq!(out[&(o.to_string(), d.to_string())], 20.0);
            }
        }
        assert_eq!(out.len(), 4);
    }

    #[test]
    fn unmapped_and_bad_weights() {
        let f = feed(vec![cell("prov", "a", "z", 2, 0, 10.0), cell("prov", "y", "a", 2, 0, 10.0)]);
        let x = xwalk(&[("a", &[("AA111", 1.0)])]);
        match map_zones(&f, &x, &toy_registry(), 3) {
            Err(HarmoniseError::UnmappedZone(z)) => assert_eq!(z, vec!["y", "z"]),
            other => panic!("{other:?}"),
        }
        let bad = BTreeMap::from([("a".to_string(), vec![("AA111".to_string(), 0.5), ("AA112".to_string(), 0.4)])]);
        assert!(matches!(ZoneCrosswalk::new("prov", bad), Err(HarmoniseError::BadWeights { .. })));
        let bad = BTreeMap::from([("a".to_string(), vec![("AA111".to_string(), 1.5)])]);
        assert!(matches!(ZoneCrosswalk::new("prov", bad), Err(HarmoniseError::BadWeights { .. })));
        let other = xwalk(&[("a", &[("ZZ999", 1.0)])]);
        let f = feed(vec![cell("prov", "a", "a", 2, 0, 10.0)]);
        assert!(matches!(map_zones(&f, &other, &toy_registry(), 3), Err(HarmoniseError::UnknownReferenceZone(_))));
    }

    #[test]
    fn roll_up_to_level_one() {
        // Brute-force roll-up on the toy hierarchy by code prefix.
        let f = feed(vec![
            cell("prov", "a", "b", 2, 0, 10.0),
            cell("prov", "b", "c", 2, 0, 20.0),
            cell("prov", "c", "d", 2, 0, 40.0),
            cell("prov", "d", "a", 2, 0, 80.0),
        ]);
        let x = xwalk(&[
            ("a", &[("AA111", 1.0)]),
            ("b", &[("AA112", 1.0)]),
            ("c", &[("AA121", 1.0)]),
            ("d", &[("AA211", 1.0)]),
        ]);
        let out = map_zones(&f, &x, &toy_registry(), 1).unwrap();
        let got = as_map(&out);
        let mut expected: BTreeMap<(String, String), f64> = BTreeMap::new();
        for c in &f.cells {
            let l3 = |z: &str| x.entries[z][0].0.clone();
            let key = (l3(&c.origin.code)[..3].to_string(), l3(&c.destination.code)[..3].to_string());
            *expected.entry(key).or_default() += c.count;
        }
        assert_eq!(got, expected);
        assert_eq!(out.total(), f.total());
        assert_eq!(out.meta.zoning, "NUTS1");
    }

    #[test]
    fn hourly_to_daily() {
        let f = feed((0..24).map(|h| cell("prov", "a", "b", 2, h, 1.0)).collect());
        let out = rebin_time(&f, TimeTarget::Daily).unwrap();
        assert_eq!(out.cells.len(), 1);
        assert_eq!(out.cells[0].count, 24.0);
        assert_eq!(out.cells[0].window, TimeWindow::daily(NaiveDate::from_ymd_opt(2020, 3, 2).unwrap()));
        assert_eq!(rebin_time(&out, TimeTarget::Daily).unwrap(), out);
    }

    #[test]
    fn daily_to_weekly_splits_weekends() {
        // 2020-03-02 is a Monday
        let f = feed((2..=8).map(|d| cell("prov", "a", "b", d, 0, 10.0)).collect());
        let daily = rebin_time(&f, TimeTarget::Daily).unwrap();
        let weekly = rebin_time(&daily, TimeTarget::Weekly).unwrap();
        let counts: Vec<(u32, f64)> = weekly.cells.iter().map(|c| (c.window.minutes, c.count)).collect();
        assert_eq!(counts, vec![(7200, 50.0), (2880, 20.0)]);
    }

    #[test]
    fn non_divisible_window() {
        let mut f = feed(vec![cell("prov", "a", "b", 2, 0, 1.0)]);
        f.meta.resolution = Resolution::Window(7 * 60);
        assert!(matches!(rebin_time(&f, TimeTarget::Daily), Err(HarmoniseError::NonDivisibleWindow(420))));
    }

    #[test]
    fn extrapolation_scales_once() {
        let mut p = crate::ingest::ProviderProfile {
            provider_id: "p".into(),
            zoning_id: "prov".into(),
            window_minutes: 60,
            stop_time_minutes: StopTime::Minutes(30),
            extrapolated: false,
            market_share: Some(0.25),
            threshold_k: 1,
            column_map: Default::default(),
            crs_id: "x".into(),
        };
        let f = feed(vec![cell("prov", "a", "b", 2, 0, 50.0)]);
        let out = extrapolate(&f, &p).unwrap();
        assert_eq!(out.cells[0].count, 200.0);
        assert!(out.meta.extrapolated);
        assert!(matches!(extrapolate(&out, &p), Err(HarmoniseError::AlreadyExtrapolated)));
        p.market_share = Some(1.0);
        assert_eq!(extrapolate(&f, &p).unwrap().cells[0].count, 50.0);
    }

    #[test]
    fn harmonized_per_day_and_provider() {
        let x = xwalk(&[("a", &[("AA111", 1.0)]), ("b", &[("AA211", 1.0)])]);
        let r = toy_registry();
        let prep = |provider: &str, days: &[u32]| {
            let mut f = feed(days.iter().map(|d| cell("prov", "a", "b", *d, 3, 30.0)).collect());
            f.meta.provider_id = provider.into();
            rebin_time(&map_zones(&f, &x, &r, 3).unwrap(), TimeTarget::Daily).unwrap()
        };
        let one = build_harmonized(&[prep("p1", &[2, 3, 4])], &r, 3).unwrap();
        assert_eq!(one.len(), 3);
        let two = build_harmonized(&[prep("p1", &[2]), prep("p2", &[2])], &r, 3).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(two[0].provider_id, "p1");
        assert_eq!(two[1].provider_id, "p2");
        assert_eq!(two[0].total(), 30.0);
        let coarse = build_harmonized(&[prep("p1", &[2])], &r, 0).unwrap();
        assert_eq!(coarse[0].cells.len(), 1);
        assert!(build_harmonized(&[], &r, 3).unwrap().is_empty());
        let raw = feed(vec![cell("prov", "a", "b", 2, 0, 1.0)]);
        assert!(matches!(build_harmonized(&[raw], &r, 3), Err(HarmoniseError::NotHarmonisable { .. })));
    }

    #[test]
    fn harmonized_csv_round_trip() {
        let mut h = HarmonizedOdm::new(NaiveDate::from_ymd_opt(2020, 3, 2).unwrap(), "p1", 3);
        h.add("AA111", "AA112", 12.5);
        h.add("AA112", "AA111", f64::NAN);
        let mut buf = Vec::new();
        write_harmonized([&h], &mut buf).unwrap();
        let back = read_harmonized(buf.as_slice()).unwrap();
        assert_eq!(back.len(), 1);
        assert_eq!(back[0].cells.len(), 2);
        assert_eq!(back[0].total(), 12.5);
        assert!(back[0].cells[&(Arc::from("AA112"), Arc::from("AA111"))].is_nan());
    }
}
