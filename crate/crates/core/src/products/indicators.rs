use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::io::Write;

use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

use super::{export_count, single_provider, ProductError, Result};
use crate::harmonise::{HarmonizedOdm, ZoneRegistry};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IndicatorPoint {
    pub date: NaiveDate,
    pub internal: f64,
    pub inward: f64,
    pub outward: f64,
    /// `internal + inward + outward`.
    pub total: f64,
    pub trend_pct: Option<f64>,
}

impl IndicatorPoint {
    fn new(date: NaiveDate, [internal, inward, outward]: [f64; 3]) -> Self {
        Self { date, internal, inward, outward, total: internal + inward + outward, trend_pct: None }
    }
}

/// Daily directional movement counts for one region and one provider.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MobilityIndicatorSeries {
    pub region: String,
    pub level: u8,
    pub provider_id: String,
    pub points: Vec<IndicatorPoint>,
}

impl MobilityIndicatorSeries {
    pub fn point(&self, date: NaiveDate) -> Option<&IndicatorPoint> {
        self.points.binary_search_by_key(&date, |p| p.date).ok().map(|i| &self.points[i])
    }
}

/// Classifies every cell of every day relative to each region at `level`:
/// both ends inside is internal, destination-only inward, origin-only outward.
///
/// Every region seen on any day gets a point for every day (zero when it has
/// no flows that day). Masked cells are ignored.
pub fn mobility_indicators<'a>(
    odms: &'a [HarmonizedOdm],
    registry: &'a ZoneRegistry,
    level: u8,
) -> Result<Vec<MobilityIndicatorSeries>> {
    let Some(provider) = single_provider(odms)? else {
        return Ok(Vec::new());
    };
    let mut seen_days = BTreeSet::new();
    for odm in odms {
        if level > odm.level {
            return Err(ProductError::LevelUnavailable { requested: level, available: odm.level });
        }
        if !seen_days.insert(odm.day) {
            return Err(ProductError::DuplicateDay(odm.day));
        }
    }

    let mut region_of: HashMap<&str, &str> = HashMap::new();
    let mut per_day: BTreeMap<NaiveDate, HashMap<&str, [f64; 3]>> = BTreeMap::new();
    for odm in odms {
        let acc = per_day.entry(odm.day).or_default();
        for ((o, d), &count) in &odm.cells {
            if count.is_nan() {
                continue;
            }
            let a = region_for(&mut region_of, registry, o, level)?;
            let b = region_for(&mut region_of, registry, d, level)?;
            if a == b {
                acc.entry(a).or_default()[0] += count;
            } else {
                acc.entry(b).or_default()[1] += count;
                acc.entry(a).or_default()[2] += count;
            }
        }
    }

    let regions: BTreeSet<&str> = per_day.values().flat_map(|m| m.keys().copied()).collect();
    Ok(regions
        .into_iter()
        .map(|r| MobilityIndicatorSeries {
            region: r.to_string(),
            level,
            provider_id: provider.to_string(),
            points: per_day
                .iter()
                .map(|(day, m)| IndicatorPoint::new(*day, m.get(r).copied().unwrap_or_default()))
                .collect(),
        })
        .collect())
}

fn region_for<'a>(
    cache: &mut HashMap<&'a str, &'a str>,
    registry: &'a ZoneRegistry,
    zone: &'a str,
    level: u8,
) -> Result<&'a str> {
    if let Some(r) = cache.get(zone) {
        return Ok(r);
    }
    let r = registry.ancestor(zone, level).ok_or_else(|| ProductError::UnknownZone(zone.to_string()))?;
    cache.insert(zone, r);
    Ok(r)
}

/// `provider_id,nuts_code,level,date,internal,inward,outward,total,trend_pct`
pub fn write_indicators<'a, W: Write>(series: impl IntoIterator<Item = &'a MobilityIndicatorSeries>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["provider_id", "nuts_code", "level", "date", "internal", "inward", "outward", "total", "trend_pct"])?;
    for s in series {
        let level = s.level.to_string();
        for p in &s.points {
            w.write_record([
                s.provider_id.as_str(),
                &s.region,
                &level,
                &p.date.to_string(),
                &export_count(p.internal),
                &export_count(p.inward),
                &export_count(p.outward),
                &export_count(p.total),
                &p.trend_pct.map(|t| format!("{t:.4}")).unwrap_or_default(),
            ])?;
        }
    }
    w.flush()?;
    Ok(())
}
