//! Full experiment on the desk preset: simulate, reconstruct with every
//! variant and print the relative-error report.
//!
//! cargo run --release --example experiment_report -- [SEED] [DIR]

use std::path::PathBuf;

use qmri::data::{run_experiment, ExperimentSpec};
use qmri::solver::Preset;

fn main() -> qmri::Result<()> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map_or(0, |s| s.parse().expect("seed must be an integer"));
    let dir = PathBuf::from(args.next().unwrap_or_else(|| format!("run_desk_{seed}")));
    let spec = ExperimentSpec::preset(Preset::Desk, seed)?;
    let summary = run_experiment(&spec, &dir)?;
    println!("{:<28} {:<9} {:<15} {:>7} {:>7} {:>7}", "setting", "variant", "source", "T1", "T2", "rho");
    for r in &summary.rows {
        println!(
            "{:<28} {:<9} {:<15} {:>7.3} {:>7.3} {:>7.3}",
            r.setting, r.variant, r.source, r.rel_t1, r.rel_t2, r.rel_rho
        );
    }
    println!("report written to {}", dir.join("report.csv").display());
    Ok(())
}
