//! Experiment harness: phantoms, masks, noisy data, error metrics, file
//! formats and the experiment runner.

mod experiment;
mod image;
mod io;
mod phantom;

pub use experiment::{
    compare_runs, read_report, reconstruct_in_dir, reference_rows, run_experiment, simulate_to_dir, write_report,
    ExperimentSpec, ReportRow, RunSummary, ERROR_FRACTION,
};
pub use image::write_png;
pub use io::{
    read_kspace, read_parameter_image, write_kspace, write_parameter_image, KSpaceHeader, Precision, KSPACE_MAGIC,
    PIMAGE_MAGIC,
};
pub use phantom::{connected_components, make_phantom, Ellipse, Phantom, PhantomDescriptor, RHO_MAX, T_MAX};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::forward::{forward, Channel, KSpaceData, LineAxis, ParameterImage, SamplingMaskSet, SignalModel};

/// Seed of one randomness subsystem derived from a master seed.
pub fn derive_seed(master: u64, subsystem: &str) -> u64 {
    // FNV-1a over the name, mixed with the master seed (splitmix64 finalizer)
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in subsystem.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3);
    }
    let mut z = master ^ h;
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Cartesian line masks whose starting line is drawn from `offset_seed`.
pub fn make_masks(
    n1: usize,
    n2: usize,
    len: usize,
    r: usize,
    offset_seed: u64,
    axis: LineAxis,
) -> Result<SamplingMaskSet> {
    if r == 0 {
        return Err(Error::InvalidParameter("undersampling factor must be at least 1".into()));
    }
    let offset = ChaCha8Rng::seed_from_u64(offset_seed).random_range(0..r);
    SamplingMaskSet::cartesian(n1, n2, len, r, offset, axis)
}

/// How the configured `sigma` maps to the noise standard deviation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum NoiseScale {
    /// Per-component standard deviation `σ`.
    #[default]
    Std,
    /// Per-component standard deviation `σ²`.
    Variance,
}

impl NoiseScale {
    pub fn name(self) -> &'static str {
        match self {
            NoiseScale::Std => "std",
            NoiseScale::Variance => "variance",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "std" => Ok(NoiseScale::Std),
            "variance" => Ok(NoiseScale::Variance),
            _ => Err(Error::Config(format!("unknown noise scale `{s}` (expected std or variance)"))),
        }
    }

    pub fn amplitude(self, sigma: f64) -> f64 {
        match self {
            NoiseScale::Std => sigma,
            NoiseScale::Variance => sigma * sigma,
        }
    }
}

/// `F_d(u_true)` plus complex Gaussian noise on the sampled entries only.
pub fn synthesize<S: SignalModel + ?Sized>(
    truth: &ParameterImage,
    model: &S,
    masks: &SamplingMaskSet,
    sigma: f64,
    scale: NoiseScale,
    noise_seed: u64,
) -> Result<KSpaceData> {
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::InvalidParameter(format!("noise level {sigma} must be finite and non-negative")));
    }
    let mut data = forward(truth, model, masks)?;
    let std = scale.amplitude(sigma);
    if std > 0.0 {
        let normal = Normal::new(0.0, std).map_err(|e| Error::InvalidParameter(e.to_string()))?;
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        for (z, &m) in data.data.iter_mut().zip(masks.masks().iter()) {
            if m {
                *z += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
            }
        }
    }
    Ok(data)
}

/// `‖X_recon − X_truth‖₂ / ‖X_truth‖₂` for one channel.
pub fn relative_error(recon: &ParameterImage, truth: &ParameterImage, channel: Channel) -> Result<f64> {
    if recon.dims() != truth.dims() {
        return Err(Error::Shape(format!("images {:?} and {:?} differ in size", recon.dims(), truth.dims())));
    }
    let (a, b) = (recon.channel_slice(channel), truth.channel_slice(channel));
    let den: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if den == 0.0 {
        return Err(Error::InvalidParameter(format!("ground truth channel {} is zero", channel.name())));
    }
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok(num / den)
}
