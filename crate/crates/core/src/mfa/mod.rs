//! Mobility Functional Areas.
//!
//! Daily areas are communities of a symmetrised flow graph at the finest
//! available zoning, found by greedy modularity maximisation. Persistent areas
//! come from how often zone pairs land in the same daily community.
//!
//! The persistence rule is a reconstruction: pairwise co-assignment
//! frequency, thresholded at `alpha`, with connected components as areas.
//! At `alpha` close to one it reduces to intersecting the daily partitions.

mod fuzzy;
mod geometry;
mod graph;
mod io;
mod louvain;

pub use self::fuzzy::{co_assignment, daily_stability, fuzzy_intersect, PersistentMfa, StabilityPoint, DEFAULT_ALPHA};
pub use self::geometry::{export_mfa_geojson, ZoneGeometries};
pub use self::graph::{build_graph, build_graph_from_feed, MobilityGraph};
pub use self::io::{read_daily_mfas, read_memberships, write_daily_mfa, write_memberships, write_stability};
pub use self::louvain::{cluster_daily, cluster_daily_with, modularity, ClusterConfig, DailyMfa};

#[derive(Debug, thiserror::Error)]
pub enum MfaError {
    #[error("no flows on {0}")]
    EmptyDay(chrono::NaiveDate),
    #[error("alpha {0} is outside (0, 1]")]
    AlphaOutOfRange(f64),
    #[error("no daily MFAs to intersect")]
    NoDailyMfas,
    #[error("zones without geometry: {}", .0.join(", "))]
    MissingGeometry(Vec<String>),
    #[error("bad geometry for zone `{zone}`: {reason}")]
    BadGeometry { zone: String, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: u64, reason: String },
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = MfaError> = std::result::Result<T, E>;
