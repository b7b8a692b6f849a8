//! Persistent mobility functional areas exported as a GeoJSON feature collection.

use odmforge::harmonise::{rebin_time, TimeTarget};
use odmforge::mfa::{build_graph_from_feed, cluster_daily, export_mfa_geojson, fuzzy_intersect, ZoneGeometries};
use odmforge::synth::{generate_scenario, ScenarioSpec};

fn main() -> anyhow::Result<()> {
    let scenario = generate_scenario(&ScenarioSpec::default_scenario())?;
    let p = scenario.provider("mno_c").expect("default provider");
    let feed = rebin_time(&p.feed()?, TimeTarget::Daily)?;
    let daily = feed.days().into_iter().map(|d| Ok(cluster_daily(&build_graph_from_feed(&feed, d)?))).collect::<anyhow::Result<Vec<_>>>()?;
    let mfas = fuzzy_intersect(&daily, 0.5)?;

    let mut csv = String::from("zone_code,wkt\n");
    for (zone, wkt) in scenario.zone_wkt("mno_c").expect("provider geometry") {
        csv.push_str(&format!("{zone},\"{wkt}\"\n"));
    }
    let geometries = ZoneGeometries::read_wkt_csv(csv.as_bytes())?;
    let fc = export_mfa_geojson(&mfas, &geometries)?;
    println!("{}", geojson::GeoJson::from(fc));
    Ok(())
}
