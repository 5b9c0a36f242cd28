//! Runs the nested solver on a small problem and checks its trace, then
//! corrupts one row to show how a violation is reported.
//!
//! cargo run --release --example diagnose_trace

use qmri::data::ExperimentSpec;
use qmri::solver::{diagnose, nested_solve, stationarity_estimate, Preset};

fn main() -> qmri::Result<()> {
    let mut spec = ExperimentSpec::preset(Preset::Desk, 2)?;
    (spec.n1, spec.n2) = (32, 32);
    spec.solver.p = 4;
    spec.solver.max_outer = 12;
    let data = spec.synthesize(&spec.phantom()?.truth)?;
    let out = nested_solve(&data, &spec.seq, &spec.solver, None)?;

    for c in diagnose(&out.trace)? {
        println!("{:<20} {} {}", c.name, if c.passed { "PASS" } else { "FAIL" }, c.detail);
    }
    let est = stationarity_estimate(&out.trace);
    println!("stationarity estimate: first {:.3e}, last {:.3e}", est[0], est[est.len() - 1]);

    let mut bad = out.trace.clone();
    bad[4].objective = bad[3].objective * 1.5;
    let mono = diagnose(&bad)?.into_iter().find(|c| c.name == "monotone_objective").unwrap();
    println!("corrupted row 4: passed {}, violation at {:?}", mono.passed, mono.violation);
    Ok(())
}
