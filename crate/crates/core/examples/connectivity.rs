//! Weekly weekday/weekend connectivity between NUTS3 regions, with output
//! suppression.

use odmforge::harmonise::{build_harmonized, map_zones, rebin_time, TimeTarget};
use odmforge::privacy::{Strategy, SuppressionPolicy};
use odmforge::products::connectivity_matrix;
use odmforge::synth::{generate_scenario, ScenarioSpec};
use odmforge::time::WeekId;

fn main() -> anyhow::Result<()> {
    let scenario = generate_scenario(&ScenarioSpec::default_scenario())?;
    let p = scenario.provider("mno_b").expect("default provider");
    let daily = rebin_time(&p.feed()?, TimeTarget::Daily)?;
    let odms = build_harmonized(&[map_zones(&daily, &p.crosswalk, &scenario.registry, 3)?], &scenario.registry, 3)?;

    let policy = SuppressionPolicy::new(500, Strategy::Mask)?;
    for week in [WeekId::of(scenario.dates[0]), WeekId::of(*scenario.dates.last().expect("dates"))] {
        for m in connectivity_matrix(&odms, week, &policy)? {
            println!("{week} {}: {} pairs, {} masked", m.day_class.as_str(), m.entries.len(), m.suppression.cells_suppressed);
            for ((o, d), c) in m.entries.iter().filter(|((o, _), _)| &**o == "SY111") {
                println!("  {o} -> {d} {c:>10.0}");
            }
        }
    }
    Ok(())
}
