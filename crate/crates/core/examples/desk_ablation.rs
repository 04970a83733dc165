//! Runs the component ablation on the default synthetic scenario and prints
//! the report table.

use hiclpl::experiment::{ablation_run, desk_config, Scenario, Variant};
use hiclpl::losses::Aggregation;
use hiclpl::trainer::Ablation;

fn main() -> hiclpl::Result<()> {
    let scenario = Scenario::default();
    let cfg = desk_config();
    let mut variants = Variant::component_ladder();
    variants.push(Variant::new(Ablation::FULL, Aggregation::Constant));
    let report = ablation_run(&scenario, &cfg, &variants, &[0, 1, 2, 3, 4])?;
    print!("{}", report.to_table());
    for row in &report.rows {
        let gaps: Vec<String> = row.per_seed.iter().map(|r| format!("{:.3}", r.prototypes.gap)).collect();
        println!("{:<28} cosine gap {}", row.variant.label, gaps.join(" "));
    }
    Ok(())
}
