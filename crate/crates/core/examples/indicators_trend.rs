//! Internal, inward and outward movements per region, with trends against
//! a pre-lockdown baseline.

use odmforge::harmonise::{build_harmonized, extrapolate, map_zones, rebin_time, TimeTarget};
use odmforge::products::{compute_trend, default_baseline, mobility_indicators};
use odmforge::synth::{generate_scenario, ScenarioSpec};

fn main() -> anyhow::Result<()> {
    let scenario = generate_scenario(&ScenarioSpec::default_scenario())?;
    let p = scenario.provider("mno_c").expect("default provider");
    // mno_c reports device counts; scale them to the population first
    let daily = extrapolate(&rebin_time(&p.feed()?, TimeTarget::Daily)?, &p.profile)?;
    let odms = build_harmonized(&[map_zones(&daily, &p.crosswalk, &scenario.registry, 3)?], &scenario.registry, 3)?;

    for level in [0, 1] {
        for s in mobility_indicators(&odms, &scenario.registry, level)? {
            let baseline = default_baseline(&s).expect("four full weeks");
            let s = compute_trend(&s, baseline)?;
            println!("{} (level {level}), baseline {baseline}", s.region);
            for pt in s.points.iter().step_by(7) {
                println!(
                    "  {}  internal {:>9.0}  inward {:>8.0}  outward {:>8.0}  trend {:>6.1}%",
                    pt.date,
                    pt.internal,
                    pt.inward,
                    pt.outward,
                    pt.trend_pct.unwrap_or(f64::NAN)
                );
            }
        }
    }
    Ok(())
}
