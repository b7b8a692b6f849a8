//! Bring three heterogeneous provider feeds to daily NUTS3 ODMs and compare them.

use odmforge::harmonise::{build_harmonized, extrapolate, map_zones, rebin_time, TimeTarget};
use odmforge::synth::{generate_scenario, ScenarioSpec};

fn main() -> anyhow::Result<()> {
    let scenario = generate_scenario(&ScenarioSpec::default_scenario())?;
    let day = scenario.dates[10];
    for p in &scenario.providers {
        let raw = p.feed()?;
        let daily = rebin_time(&raw, TimeTarget::Daily)?;
        // device counts are scaled to population; pre-extrapolated feeds pass through
        let scaled = if p.profile.extrapolated { daily } else { extrapolate(&daily, &p.profile)? };
        let mapped = map_zones(&scaled, &p.crosswalk, &scenario.registry, 3)?;
        let odms = build_harmonized(&[mapped], &scenario.registry, 3)?;
        let odm = odms.iter().find(|o| o.day == day).expect("day present");
        println!(
            "{:<6} {:>5} zones, {:>4}-minute windows, {:>8} raw cells -> {:>3} NUTS3 pairs on {day}, total {:.0}",
            p.spec.provider_id,
            p.crosswalk.entries.len(),
            p.profile.window_minutes,
            raw.cells.len(),
            odm.cells.len(),
            odm.total()
        );
    }
    let truth = scenario.truth_odms(3)?;
    println!("truth                                          {:>3} NUTS3 pairs on {day}, total {:.0}", truth[10].cells.len(), truth[10].total());
    Ok(())
}
