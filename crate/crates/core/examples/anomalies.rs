//! Inject a one-day spike into a region and find it with the same-weekday
//! robust z-score.

use chrono::NaiveDate;
use odmforge::harmonise::{build_harmonized, map_zones, rebin_time, TimeTarget};
use odmforge::products::{detect_anomalies, mobility_indicators, AnomalyConfig};
use odmforge::synth::{generate_scenario, Modulation, ScenarioSpec};

fn main() -> anyhow::Result<()> {
    let day = NaiveDate::from_ymd_opt(2020, 3, 4).expect("valid date");
    let mut spec = ScenarioSpec::default_scenario();
    spec.modulation.push(Modulation { from: day, to: day, factor: 5.0, region: Some("SY212".into()) });
    let scenario = generate_scenario(&spec)?;

    let p = scenario.provider("mno_a").expect("default provider");
    let daily = rebin_time(&p.feed()?, TimeTarget::Daily)?;
    let odms = build_harmonized(&[map_zones(&daily, &p.crosswalk, &scenario.registry, 3)?], &scenario.registry, 3)?;
    let mut flags = Vec::new();
    for s in mobility_indicators(&odms, &scenario.registry, 3)? {
        flags.extend(detect_anomalies(&s, &AnomalyConfig::default()));
    }
    for f in flags.iter().filter(|f| f.date == day) {
        println!("{} {} {:<8} {:<5} z = {:>7.1}", f.date, f.region, f.metric, f.direction, f.zscore);
    }
    // the lockdown phases from 2020-03-09 on are drops against earlier weeks too
    let later = flags.iter().filter(|f| f.date >= NaiveDate::from_ymd_opt(2020, 3, 9).expect("valid date")).count();
    println!("{} flags in total, {later} of them from the lockdown onwards", flags.len());
    Ok(())
}
