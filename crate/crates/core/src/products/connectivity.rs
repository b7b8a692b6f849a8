use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use chrono::NaiveDate;
use serde::Serialize;

use super::{export_count, single_provider, ProductError, Result};
use crate::harmonise::HarmonizedOdm;
use crate::privacy::{Strategy, SuppressionPolicy, SuppressionStats};
use crate::time::{DayClass, WeekId};

/// Bilateral level-3 flows for one ISO week and day class. Internal
/// (diagonal) movements are excluded.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConnectivityMatrix {
    pub week: WeekId,
    pub day_class: DayClass,
    pub level: u8,
    pub provider_id: String,
    #[serde(skip)]
    pub entries: BTreeMap<(Arc<str>, Arc<str>), f64>,
    /// Days of the week with no ODM for this provider.
    pub missing_days: Vec<NaiveDate>,
    pub suppression: SuppressionStats,
}

impl ConnectivityMatrix {
    pub fn row_sum(&self, origin: &str) -> f64 {
        self.entries.iter().filter(|((o, _), c)| &**o == origin && !c.is_nan()).map(|(_, c)| c).sum()
    }
}

/// Weekday and weekend sums of off-diagonal flows for `week`, before any
/// suppression.
pub fn aggregate_week(odms: &[HarmonizedOdm], week: WeekId) -> Result<[ConnectivityMatrix; 2]> {
    let provider = single_provider(odms)?.unwrap_or_default().to_string();
    let in_week: Vec<&HarmonizedOdm> = odms.iter().filter(|o| week.contains(o.day)).collect();
    if let Some(o) = in_week.iter().find(|o| o.level != 3) {
        return Err(ProductError::LevelUnavailable { requested: 3, available: o.level });
    }
    let missing_days: Vec<NaiveDate> = week.days().filter(|d| !in_week.iter().any(|o| o.day == *d)).collect();
    let mut out = [DayClass::Weekday, DayClass::Weekend].map(|day_class| ConnectivityMatrix {
        week,
        day_class,
        level: 3,
        provider_id: provider.clone(),
        entries: BTreeMap::new(),
        missing_days: missing_days.clone(),
        suppression: SuppressionStats::default(),
    });
    for odm in in_week {
        let m = match DayClass::of(odm.day) {
            DayClass::Weekday => &mut out[0],
            DayClass::Weekend => &mut out[1],
        };
        for ((o, d), &c) in &odm.cells {
            if o != d && !c.is_nan() {
                *m.entries.entry((o.clone(), d.clone())).or_insert(0.0) += c;
            }
        }
    }
    Ok(out)
}

/// [`aggregate_week`] followed by output suppression.
pub fn connectivity_matrix(odms: &[HarmonizedOdm], week: WeekId, policy: &SuppressionPolicy) -> Result<[ConnectivityMatrix; 2]> {
    let mut out = aggregate_week(odms, week)?;
    for m in &mut out {
        let mut stats = SuppressionStats { cells_in: m.entries.len() as u64, ..Default::default() };
        m.entries.retain(|_, c| {
            if policy.is_disclosive(*c) {
                stats.cells_suppressed += 1;
                stats.count_suppressed += *c;
                if policy.strategy == Strategy::Mask {
                    *c = f64::NAN;
                    return true;
                }
                return false;
            }
            true
        });
        m.suppression = stats;
    }
    Ok(out)
}

/// `provider_id,week,day_class,origin,destination,count`
pub fn write_connectivity<'a, W: Write>(matrices: impl IntoIterator<Item = &'a ConnectivityMatrix>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["provider_id", "week", "day_class", "origin", "destination", "count"])?;
    for m in matrices {
        let week = m.week.to_string();
        for ((o, d), c) in &m.entries {
            w.write_record([m.provider_id.as_str(), &week, m.day_class.as_str(), o, d, &export_count(*c)])?;
        }
    }
    w.flush()?;
    Ok(())
}
