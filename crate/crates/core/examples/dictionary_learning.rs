//! Orthogonal dictionary learning on the patches of one phantom channel.
//!
//! cargo run --example dictionary_learning

use nalgebra::DMatrix;
use qmri::data::make_phantom;
use qmri::dictlearn::{dict_learn, orthogonality_defect, DictLearnParams};
use qmri::forward::{patch_extract, Channel, PatchConfig};

fn main() -> qmri::Result<()> {
    let ph = make_phantom(48, 48, 5)?;
    let t1 = ph.truth.channel(Channel::T1).mapv(|v| v / 260.0);
    let pc = PatchConfig::new(4, 48, 48)?;
    let x = patch_extract(t1.view(), &pc);
    let params = DictLearnParams { beta: 0.5, lambda_d: 1.0, lambda_c: 1.0, eta: 1e-4, max_iters: 200 };
    let out = dict_learn(&x, &DMatrix::identity(pc.k(), pc.k()), &DMatrix::zeros(pc.k(), pc.m()), &params)?;

    let cert = &out.certificate;
    let nnz = out.c.iter().filter(|v| **v != 0.0).count();
    println!(
        "{} sweeps, objective {:.4e} -> {:.4e}",
        cert.iterations(),
        cert.initial_objective,
        cert.final_objective()
    );
    println!("nonzero codes {nnz} of {}, ‖DᵀD − I‖ = {:.1e}", out.c.len(), orthogonality_defect(&out.d));
    println!(
        "sufficient decrease {}, residual bound {}, step bound {:.1}",
        cert.all_sufficient_decrease(),
        cert.all_residual_bounds_data(),
        cert.complexity_bound()
    );
    for r in cert.sweeps.iter().step_by(25) {
        println!(
            "sweep {:>3}: g = {:.6e}, step² = {:.3e}, residual {:.3e}",
            r.sweep,
            r.objective,
            r.step_d_sq + r.step_c_sq,
            r.residual
        );
    }
    Ok(())
}
