//! Writes a phantom, its noisy undersampled data and PNG previews to a run
//! directory, then reads the data back.
//!
//! cargo run --example simulate_data -- [DIR]

use std::path::PathBuf;

use qmri::data::{read_kspace, simulate_to_dir, ExperimentSpec};
use qmri::solver::Preset;

fn main() -> qmri::Result<()> {
    let dir = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "run_simulated".into()));
    let spec = ExperimentSpec::preset(Preset::Desk, 7)?;
    let (phantom, data) = simulate_to_dir(&spec, &dir)?;
    println!(
        "{} regions, {} samples, noise sigma {}",
        phantom.descriptor.region_count(),
        data.masks.total_sampled(),
        spec.sigma
    );

    let (back, header) = read_kspace(std::fs::File::open(dir.join("data.ksp"))?)?;
    println!(
        "read back {:?} entries (r = {}, {:?} precision), identical: {}",
        back.data.dim(),
        header.r,
        header.precision,
        back == data
    );
    for entry in std::fs::read_dir(&dir)? {
        println!("  {}", entry?.file_name().to_string_lossy());
    }
    Ok(())
}
