//! A custom synthetic scenario: the gravity model seen through one coarse provider.

use odmforge::synth::{generate_scenario, ScenarioSpec};

fn main() -> anyhow::Result<()> {
    let mut spec = ScenarioSpec::default_scenario();
    spec.seed = 11;
    spec.days = 14;
    spec.gravity.distance_decay = 2.0;
    spec.providers.retain(|p| p.provider_id == "mno_b");
    spec.validate()?;
    let scenario = generate_scenario(&spec)?;

    println!("{} atoms, {} days, providers {:?}", scenario.atoms.len(), scenario.dates.len(), scenario.providers.iter().map(|p| &p.spec.provider_id).collect::<Vec<_>>());
    let day0 = &scenario.truth[0];
    let total: f64 = day0.iter().sum();
    let staying: f64 = (0..scenario.atoms.len()).map(|i| day0[i * scenario.atoms.len() + i]).sum();
    println!("truth on {}: {total:.0} trips, {:.1}% within an atom", scenario.dates[0], 100.0 * staying / total);
    let p = &scenario.providers[0];
    println!("{}: {} cells at or above K = {}", p.spec.provider_id, p.cells.len(), p.spec.threshold_k);
    print!("{}", spec.to_toml_string());
    Ok(())
}
