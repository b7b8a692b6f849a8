//! Parse a provider feed through its column map and run the reasonability audit.

use odmforge::ingest::{canonicalize, read_odm, ProviderProfile, ThresholdMode};
use odmforge::privacy::{reasonability_test, AuditConfig};

const PROFILE: &str = r#"
provider_id = "telco"
zoning_id = "telco-cells"
window_minutes = 60
stop_time_minutes = 15
extrapolated = false
market_share = 0.3
threshold_k = 15
crs_id = "EPSG:4326"

[column_map]
origin = "from"
destination = "to"
window_start = "hour"
count = "devices"
"#;

const FEED: &str = "\
from,to,hour,devices
C1,C2,2020-03-02T08:00,42
C2,C1,2020-03-02T08:00,17
C1,C2,2020-03-02T08:00,20
C1,C3,2020-03-02T09:00,9
";

fn main() -> anyhow::Result<()> {
    let profile = ProviderProfile::from_toml_str(PROFILE)?;

    // a strict parse refuses the row below the declared threshold
    match read_odm(FEED.as_bytes(), &profile, ThresholdMode::Strict) {
        Ok(_) => println!("strict parse accepted the feed"),
        Err(e) => println!("strict parse: {e}"),
    }

    let parsed = read_odm(FEED.as_bytes(), &profile, ThresholdMode::Permissive)?;
    let feed = canonicalize(parsed.cells, &profile)?;
    println!("{} rows -> {} canonical cells (duplicates merged), total {}", 4, feed.cells.len(), feed.total());

    let report = reasonability_test(&feed, &profile, &AuditConfig::default());
    for c in &report.checks {
        println!("{:<12} {:<5} {}", c.name, if c.passed { "pass" } else { "FAIL" }, c.details);
    }
    println!("verdict: {:?}", report.verdict);
    Ok(())
}
