//! Nested, one-step and plain Levenberg–Marquardt reconstructions of the
//! same small data set.
//!
//! cargo run --release --example solver_variants

use qmri::data::{relative_error, ExperimentSpec};
use qmri::forward::Channel;
use qmri::solver::{run_variant, Preset, Variant};

fn main() -> qmri::Result<()> {
    let mut spec = ExperimentSpec::preset(Preset::Desk, 1)?;
    (spec.n1, spec.n2) = (32, 32);
    spec.solver.p = 4;
    spec.solver.max_outer = 15;
    spec.solver.lm_iters = 15;
    let truth = spec.phantom()?.truth;
    let data = spec.synthesize(&truth)?;
    for v in Variant::ALL {
        let out = run_variant(v, &data, &spec.seq, &spec.solver, None)?;
        let j: Vec<String> = out.trace.iter().step_by(5).map(|r| format!("{:.3e}", r.objective)).collect();
        let err = [Channel::T1, Channel::T2, Channel::Rho].map(|c| relative_error(&out.state.u, &truth, c).unwrap());
        println!("{:>8}: J every 5 iterations [{}]", v.name(), j.join(", "));
        println!("          relative error T1 {:.3}, T2 {:.3}, rho {:.3}", err[0], err[1], err[2]);
    }
    Ok(())
}
