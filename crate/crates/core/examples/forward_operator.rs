//! Undersampled k-space data of a phantom and an adjoint check of the
//! linearized operator.
//!
//! cargo run --example forward_operator

use qmri::bloch::PulseSequence;
use qmri::data::make_phantom;
use qmri::forward::{forward, LineAxis, Linearization, ParameterImage, SamplingMaskSet};

fn main() -> qmri::Result<()> {
    let (n, len) = (32, 10);
    let truth = make_phantom(n, n, 3)?.truth;
    let seq = PulseSequence::default_mrf(len, 3)?;
    let masks = SamplingMaskSet::cartesian(n, n, len, 4, 0, LineAxis::Rows)?;
    let data = forward(&truth, &seq, &masks)?;
    println!(
        "{} of {} k-space entries sampled, ‖f‖ = {:.4e}",
        masks.total_sampled(),
        len * n * n,
        data.norm_sqr().sqrt()
    );

    let lin = Linearization::new(&truth, &seq);
    let h = ParameterImage::from_fn(n, n, |i, j| [((i + j) % 3) as f64, (i as f64).sin(), (j as f64).cos()]);
    let lhs = lin.jvp(&h, &masks)?.dot(&data);
    let rhs = h.dot(&lin.vjp(&data)?);
    println!("<F'h, f> = {lhs:.12e}\n<h, F'*f> = {rhs:.12e}");
    Ok(())
}
