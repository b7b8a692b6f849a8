use super::anomaly::median;
use super::{MobilityIndicatorSeries, ProductError, Result};
use crate::time::{earliest_full_weeks, DateRange, DayClass};

/// Default baseline length in ISO weeks.
pub const BASELINE_WEEKS: usize = 4;

/// Earliest run of [`BASELINE_WEEKS`] complete ISO weeks in the series.
pub fn default_baseline(series: &MobilityIndicatorSeries) -> Option<DateRange> {
    let dates: Vec<_> = series.points.iter().map(|p| p.date).collect();
    earliest_full_weeks(&dates, BASELINE_WEEKS)
}

/// Expresses each day's total as a percentage of the baseline median total of
/// the same day class. Days whose baseline median is zero get no trend.
pub fn compute_trend(series: &MobilityIndicatorSeries, baseline: DateRange) -> Result<MobilityIndicatorSeries> {
    let mut reference = [0.0; 2];
    for (i, class) in [DayClass::Weekday, DayClass::Weekend].into_iter().enumerate() {
        let mut values: Vec<f64> = series
            .points
            .iter()
            .filter(|p| baseline.contains(p.date) && DayClass::of(p.date) == class)
            .map(|p| p.total)
            .collect();
        if values.len() < 2 {
            return Err(ProductError::InsufficientBaseline { class, found: values.len() });
        }
        reference[i] = median(&mut values);
    }
    let mut out = series.clone();
    for p in &mut out.points {
        let base = match DayClass::of(p.date) {
            DayClass::Weekday => reference[0],
            DayClass::Weekend => reference[1],
        };
        p.trend_pct = (base > 0.0).then(|| 100.0 * p.total / base);
    }
    Ok(out)
}
