use std::fmt;
use std::io::Write;

use chrono::{Datelike, NaiveDate};
use serde::{Deserialize, Serialize};

use super::{MobilityIndicatorSeries, Result};

/// Consistency constant making the MAD estimate the standard deviation of a
/// normal distribution.
pub const MAD_SCALE: f64 = 1.4826;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Internal,
    Inward,
    Outward,
    Total,
}

impl Metric {
    pub const ALL: [Metric; 4] = [Metric::Internal, Metric::Inward, Metric::Outward, Metric::Total];

    fn value(self, p: &super::IndicatorPoint) -> f64 {
        match self {
            Metric::Internal => p.internal,
            Metric::Inward => p.inward,
            Metric::Outward => p.outward,
            Metric::Total => p.total,
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Metric::Internal => "internal",
            Metric::Inward => "inward",
            Metric::Outward => "outward",
            Metric::Total => "total",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Spike,
    Drop,
}

impl fmt::Display for Direction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Direction::Spike => "spike",
            Direction::Drop => "drop",
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyFlag {
    pub provider_id: String,
    pub region: String,
    pub date: NaiveDate,
    pub metric: Metric,
    pub zscore: f64,
    pub direction: Direction,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnomalyConfig {
    /// Minimum |z| that raises a flag.
    pub trigger: f64,
    /// Number of prior same-weekday observations forming the reference.
    pub window_weeks: usize,
    pub metrics: Vec<Metric>,
}

impl Default for AnomalyConfig {
    fn default() -> Self {
        Self { trigger: 3.0, window_weeks: 4, metrics: Metric::ALL.to_vec() }
    }
}

/// Median of a non-empty slice (mean of the two middle values for even length).
/// Reorders the slice.
pub fn median(values: &mut [f64]) -> f64 {
    assert!(!values.is_empty(), "median of empty slice");
    values.sort_by(|a, b| a.total_cmp(b));
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        (values[n / 2 - 1] + values[n / 2]) / 2.0
    }
}

/// Median absolute deviation around `center`.
pub fn mad(values: &[f64], center: f64) -> f64 {
    let mut dev: Vec<f64> = values.iter().map(|v| (v - center).abs()).collect();
    median(&mut dev)
}

/// Scores each date against the previous `window_weeks` observations on the
/// same weekday with a robust z-score, `(x - median) / (1.4826 * MAD)`.
///
/// Dates without enough history are not scored; nor are dates whose window
/// has zero MAD.
pub fn detect_anomalies(series: &MobilityIndicatorSeries, config: &AnomalyConfig) -> Vec<AnomalyFlag> {
    let mut flags = Vec::new();
    if config.window_weeks == 0 {
        return flags;
    }
    for (i, point) in series.points.iter().enumerate() {
        let weekday = point.date.weekday();
        let prior: Vec<&super::IndicatorPoint> = series.points[..i]
            .iter()
            .rev()
            .filter(|p| p.date.weekday() == weekday)
            .take(config.window_weeks)
            .collect();
        if prior.len() < config.window_weeks {
            continue;
        }
        for &metric in &config.metrics {
            let mut window: Vec<f64> = prior.iter().map(|p| metric.value(p)).collect();
            let center = median(&mut window);
            let spread = mad(&window, center);
            if spread == 0.0 {
                log::debug!("{} {} {metric}: zero MAD, not scored", series.region, point.date);
                continue;
            }
            let z = (metric.value(point) - center) / (MAD_SCALE * spread);
            if z.abs() >= config.trigger {
                flags.push(AnomalyFlag {
                    provider_id: series.provider_id.clone(),
                    region: series.region.clone(),
                    date: point.date,
                    metric,
                    zscore: z,
                    direction: if z > 0.0 { Direction::Spike } else { Direction::Drop },
                });
            }
        }
    }
    flags
}

/// `provider_id,nuts_code,date,metric,zscore,direction`
pub fn write_anomalies<'a, W: Write>(flags: impl IntoIterator<Item = &'a AnomalyFlag>, writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["provider_id", "nuts_code", "date", "metric", "zscore", "direction"])?;
    for f in flags {
        w.write_record([
            f.provider_id.as_str(),
            &f.region,
            &f.date.to_string(),
            &f.metric.to_string(),
            &format!("{:.4}", f.zscore),
            &f.direction.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
