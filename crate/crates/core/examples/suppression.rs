//! Output suppression at several thresholds, dropping or masking small cells.

use chrono::NaiveDate;
use odmforge::harmonise::HarmonizedOdm;
use odmforge::privacy::{suppress, Strategy, SuppressionPolicy};

fn main() -> anyhow::Result<()> {
    let mut odm = HarmonizedOdm::new(NaiveDate::from_ymd_opt(2020, 3, 2).expect("valid date"), "demo", 3);
    for (o, d, c) in [("AA111", "AA112", 4.0), ("AA111", "AA121", 19.0), ("AA112", "AA111", 30.0), ("AA121", "AA111", 75.0), ("AA121", "AA121", 0.0)] {
        odm.add(o, d, c);
    }
    for k in [5, 20, 50] {
        for strategy in [Strategy::Drop, Strategy::Mask] {
            let (out, stats) = suppress(&odm, &SuppressionPolicy::new(k, strategy)?);
            let cells: Vec<String> = out.cells.iter().map(|((o, d), c)| format!("{o}->{d}={c}")).collect();
            println!("k_out {k:>2} {strategy:?}: {} suppressed ({} trips) | {}", stats.cells_suppressed, stats.count_suppressed, cells.join(" "));
        }
    }
    // an output threshold may not be weaker than any provider's own
    println!("{:?}", SuppressionPolicy::for_providers(10, Strategy::Drop, [15, 30]).map(|p| p.k_out));
    Ok(())
}
