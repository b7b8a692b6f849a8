//! Mobility data products: directional indicators with baseline-relative
//! trends, weekly connectivity matrices, and early-warning anomaly flags.

mod anomaly;
mod connectivity;
mod indicators;
mod trend;

pub use anomaly::{detect_anomalies, mad, median, write_anomalies, AnomalyConfig, AnomalyFlag, Direction, Metric, MAD_SCALE};
pub use connectivity::{aggregate_week, connectivity_matrix, write_connectivity, ConnectivityMatrix};
pub use indicators::{mobility_indicators, write_indicators, IndicatorPoint, MobilityIndicatorSeries};
pub use trend::{compute_trend, default_baseline, BASELINE_WEEKS};

#[derive(Debug, thiserror::Error)]
pub enum ProductError {
    #[error("level {requested} requested but the ODMs are at level {available}")]
    LevelUnavailable { requested: u8, available: u8 },
    #[error("ODMs from several providers ({0}); products are built per provider")]
    MixedProviders(String),
    #[error("zone `{0}` is not in the reference registry")]
    UnknownZone(String),
    #[error("two ODMs for {0}")]
    DuplicateDay(chrono::NaiveDate),
    #[error("baseline needs at least 2 {class} dates, found {found}")]
    InsufficientBaseline { class: crate::time::DayClass, found: usize },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ProductError> = std::result::Result<T, E>;

/// Counts in product files are rounded half-to-even on export only.
pub(crate) fn export_count(c: f64) -> String {
    if c.is_nan() {
        crate::harmonise::MASKED_TEXT.to_string()
    } else {
        format!("{}", c.round_ties_even())
    }
}

pub(crate) fn single_provider(odms: &[crate::harmonise::HarmonizedOdm]) -> Result<Option<&str>> {
    let mut ids: Vec<&str> = odms.iter().map(|o| o.provider_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    match ids.len() {
        0 => Ok(None),
        1 => Ok(Some(ids[0])),
        _ => Err(ProductError::MixedProviders(ids.join(", "))),
    }
}
