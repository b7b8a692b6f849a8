//! Synthesise the default scenario, then run every stage and list the manifest.

use odmforge::pipeline::{run_pipeline, RunConfig};
use odmforge::synth::{generate_scenario, ScenarioSpec};

fn main() -> anyhow::Result<()> {
    let dir = std::env::temp_dir().join("odmforge-full-pipeline");
    let scenario = generate_scenario(&ScenarioSpec::default_scenario())?;
    scenario.write(&dir)?;

    let mut config = RunConfig::for_scenario(&scenario, "out");
    config.base_dir = dir.clone();
    config.k_out = 50;
    let summary = run_pipeline(&config)?;

    let m = &summary.manifest;
    println!("{} {} config {}", m.tool, m.version, &m.config_sha256[..12]);
    println!("audit: {:?}", m.audit);
    for s in &m.stages {
        println!("{:<12} {:<8} {:>9} -> {:>9}", s.stage, s.provider, s.rows_in, s.rows_out);
    }
    for (path, f) in &m.outputs {
        if !path.starts_with("mfa/daily") {
            let rows = f.rows.map_or("-".to_string(), |r| r.to_string());
            println!("{path:<28} {rows:>6} rows  {}", &f.sha256[..12]);
        }
    }
    println!("written to {}", summary.output_dir.display());
    Ok(())
}
