//! Fingerprints of a few tissues and the sensitivity of one of them.
//!
//! cargo run --example bloch_signal

use qmri::bloch::{signal, signal_jacobian, PulseSequence, TissueParams};

fn main() -> qmri::Result<()> {
    let seq = PulseSequence::default_mrf(20, 1)?;
    println!("sequence: {} pulses, flips {:.1?} deg", seq.len(), &seq.flip_deg()[..5]);

    let tissues = [("white", TissueParams::new(65.0, 110.0, 75.0)), ("csf", TissueParams::new(100.0, 240.0, 200.0))];
    for (name, u) in tissues {
        let s = signal(u, &seq);
        let mags: Vec<String> = s.iter().take(8).map(|z| format!("{:.2}", z.norm())).collect();
        println!("{name:>6}: |m_t| = {} ...", mags.join(" "));
    }

    let jac = signal_jacobian(tissues[0].1, &seq);
    for (t, row) in jac.iter().enumerate().take(4) {
        println!("t = {t}: d/drho {:.3}, d/dT1 {:.3e}, d/dT2 {:.3e}", row[0], row[1], row[2]);
    }
    Ok(())
}
