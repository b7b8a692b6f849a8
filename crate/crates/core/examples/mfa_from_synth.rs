use odmforge::harmonise::{rebin_time, TimeTarget};
use odmforge::mfa::{build_graph_from_feed, cluster_daily, fuzzy_intersect};
use odmforge::synth::{generate_scenario, ScenarioSpec};

fn main() -> anyhow::Result<()> {
    let scenario = generate_scenario(&ScenarioSpec::default_scenario())?;
    let fine = scenario.provider("mno_a").expect("default provider");
    let feed = rebin_time(&fine.feed()?, TimeTarget::Daily)?;
    let daily: Vec<_> = feed.days().into_iter().map(|d| build_graph_from_feed(&feed, d).map(|g| cluster_daily(&g))).collect::<Result<_, _>>()?;
    for d in daily.iter().take(3).chain(daily.iter().skip(50).take(3)) {
        println!("{} Q={:.4} clusters={:?}", d.day, d.modularity, d.clusters.iter().map(|c| c.len()).collect::<Vec<_>>());
    }
    for m in fuzzy_intersect(&daily, 0.5)? {
        println!("MFA {} ({} zones, {} days): {:?}", m.id, m.members.len(), m.support_days, m.zones().collect::<Vec<_>>());
    }
    Ok(())
}
