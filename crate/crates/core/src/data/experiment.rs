//! Experiment description, the run-directory layout and the variant report.
//!
//! A run directory holds:
//!
//! | file | content |
//! |---|---|
//! | `config_resolved.txt` | every `data.*`, `seq.*` and `solver.*` key with its value |
//! | `truth.pim`, `data.ksp` | ground truth and measured data (see the `io` module) |
//! | `recon_<variant>.pim` | reconstruction |
//! | `trace_<variant>.csv` | outer-iteration trace |
//! | `<channel>_<variant>.png`, `<channel>_truth.png` | maps on the window `[lower, upper]` of the box |
//! | `error_<channel>_<variant>.png` | `|recon − truth|` on `[0, ERROR_FRACTION · upper]` |
//! | `report.csv` | relative errors per variant plus reference rows |
//!
//! `report.csv` columns: `setting, variant, source, rel_t1, rel_t2, rel_rho,
//! outer_iterations, final_objective, final_data_term, stop`. Rows with
//! `source = reference-only` carry published numbers for context and leave the
//! run columns empty.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::io::open;
use super::{
    derive_seed, make_masks, make_phantom, read_kspace, read_parameter_image, relative_error, synthesize, write_kspace,
    write_parameter_image, write_png, NoiseScale, Phantom, Precision,
};
use crate::bloch::PulseSequence;
use crate::config::{fmt_f64, KeyValues};
use crate::error::{Error, Result};
use crate::forward::{Channel, KSpaceData, LineAxis, ParameterImage, SamplingMaskSet};
use crate::solver::{
    read_trace_file, run_variant, write_trace_file, Preset, SolveOutput, SolverConfig, StopReason, Variant,
};

/// Upper end of the error-image window as a fraction of the box upper bound.
pub const ERROR_FRACTION: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentSpec {
    pub preset: Preset,
    pub n1: usize,
    pub n2: usize,
    pub r: usize,
    pub axis: LineAxis,
    pub sigma: f64,
    pub noise_scale: NoiseScale,
    pub seed: u64,
    pub phantom_seed: u64,
    pub noise_seed: u64,
    pub mask_seed: u64,
    pub precision: Precision,
    pub variants: Vec<Variant>,
    pub seq: PulseSequence,
    pub solver: SolverConfig,
}

struct DataPreset {
    size: usize,
    len: usize,
    r: usize,
    sigma: f64,
}

fn data_preset(p: Preset) -> DataPreset {
    match p {
        Preset::Paper16x => DataPreset { size: 256, len: 100, r: 16, sigma: 2.0 },
        Preset::Paper32x => DataPreset { size: 256, len: 100, r: 32, sigma: 5.0 },
        Preset::Desk => DataPreset { size: 64, len: 20, r: 8, sigma: 1.0 },
    }
}

impl ExperimentSpec {
    /// Preset values with all subsystem seeds derived from `seed`.
    pub fn preset(preset: Preset, seed: u64) -> Result<Self> {
        let d = data_preset(preset);
        Ok(Self {
            preset,
            n1: d.size,
            n2: d.size,
            r: d.r,
            axis: LineAxis::Rows,
            sigma: d.sigma,
            noise_scale: NoiseScale::Std,
            seed,
            phantom_seed: derive_seed(seed, "phantom"),
            noise_seed: derive_seed(seed, "noise"),
            mask_seed: derive_seed(seed, "mask"),
            precision: Precision::Double,
            variants: Variant::ALL.to_vec(),
            seq: PulseSequence::default_mrf(d.len, derive_seed(seed, "sequence"))?,
            solver: SolverConfig::preset(preset),
        })
    }

    /// Reads a configuration. `data.preset` (default `fallback`) and
    /// `data.seed` pick the base values; every other key overrides one field.
    /// Unknown keys are an error.
    pub fn from_kv(mut kv: KeyValues, fallback: Preset) -> Result<Self> {
        let preset = match kv.take_raw("data.preset") {
            Some(s) => Preset::parse(&s)?,
            None => fallback,
        };
        let seed: u64 = kv.take("data.seed")?.unwrap_or(0);
        let mut spec = Self::preset(preset, seed)?;
        if let Some(n) = kv.take::<usize>("data.size")? {
            (spec.n1, spec.n2) = (n, n);
        }
        if let Some(n) = kv.take("data.n1")? {
            spec.n1 = n;
        }
        if let Some(n) = kv.take("data.n2")? {
            spec.n2 = n;
        }
        if let Some(r) = kv.take("data.r")? {
            spec.r = r;
        }
        if let Some(a) = kv.take_raw("data.axis") {
            spec.axis = LineAxis::parse(&a)?;
        }
        if let Some(s) = kv.take("data.sigma")? {
            spec.sigma = s;
        }
        if let Some(s) = kv.take_raw("data.noise_scale") {
            spec.noise_scale = NoiseScale::parse(&s)?;
        }
        if let Some(s) = kv.take("data.phantom_seed")? {
            spec.phantom_seed = s;
        }
        if let Some(s) = kv.take("data.noise_seed")? {
            spec.noise_seed = s;
        }
        if let Some(s) = kv.take("data.mask_seed")? {
            spec.mask_seed = s;
        }
        if let Some(s) = kv.take_raw("data.precision") {
            spec.precision = Precision::parse(&s)?;
        }
        if let Some(list) = kv.take_list::<String>("data.variants")? {
            spec.variants = list.iter().map(|s| Variant::parse(s)).collect::<Result<_>>()?;
        }
        // sequence: explicit keys win, the preset fills in length and seed
        let seq_keys: Vec<String> = kv.keys().filter(|k| k.starts_with("seq.")).map(String::from).collect();
        if !seq_keys.is_empty() {
            let mut sub = KeyValues::new();
            for k in &seq_keys {
                sub.set(k, kv.take_raw(k).expect("listed key"));
            }
            if !sub.contains("seq.tr") && !sub.contains("seq.L") {
                sub.set("seq.L", spec.seq.len().to_string());
            }
            if !sub.contains("seq.tr") && !sub.contains("seq.seed") {
                sub.set("seq.seed", derive_seed(seed, "sequence").to_string());
            }
            spec.seq = PulseSequence::from_kv(&mut sub)?;
            sub.finish()?;
        }
        spec.solver.apply_kv(&mut kv)?;
        kv.finish()?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n1 < 8 || self.n2 < 8 {
            return Err(Error::Config(format!("image size {}×{} is below 8×8", self.n1, self.n2)));
        }
        if self.r == 0 {
            return Err(Error::Config("data.r must be at least 1".into()));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!("data.sigma = {} must be non-negative", self.sigma)));
        }
        if self.variants.is_empty() {
            return Err(Error::Config("data.variants is empty".into()));
        }
        if self.solver.p > self.n1.min(self.n2) {
            return Err(Error::Config(format!("patch size {} exceeds the image", self.solver.p)));
        }
        self.solver.validate()
    }

    /// Every parameter, explicitly, in a form [`Self::from_kv`] reads back.
    pub fn to_kv(&self) -> KeyValues {
        let mut kv = KeyValues::new();
        kv.set("data.preset", self.preset.name());
        kv.set("data.seed", self.seed.to_string());
        kv.set("data.n1", self.n1.to_string());
        kv.set("data.n2", self.n2.to_string());
        kv.set("data.r", self.r.to_string());
        kv.set("data.axis", self.axis.name());
        kv.set("data.sigma", fmt_f64(self.sigma));
        kv.set("data.noise_scale", self.noise_scale.name());
        kv.set("data.phantom_seed", self.phantom_seed.to_string());
        kv.set("data.noise_seed", self.noise_seed.to_string());
        kv.set("data.mask_seed", self.mask_seed.to_string());
        kv.set("data.precision", self.precision.name());
        kv.set_list("data.variants", &self.variants.iter().map(|v| v.name()).collect::<Vec<_>>());
        self.seq.to_kv(&mut kv);
        self.solver.to_kv(&mut kv);
        kv
    }

    pub fn read(path: &Path, fallback: Preset) -> Result<Self> {
        Self::from_kv(KeyValues::read(path)?, fallback)
    }

    pub fn phantom(&self) -> Result<Phantom> {
        make_phantom(self.n1, self.n2, self.phantom_seed)
    }

    pub fn masks(&self) -> Result<SamplingMaskSet> {
        make_masks(self.n1, self.n2, self.seq.len(), self.r, self.mask_seed, self.axis)
    }

    pub fn synthesize(&self, truth: &ParameterImage) -> Result<KSpaceData> {
        synthesize(truth, &self.seq, &self.masks()?, self.sigma, self.noise_scale, self.noise_seed)
    }

    /// Short description used in the `setting` column.
    pub fn setting(&self) -> String {
        format!("{} {}x{} r={} sigma={}", self.preset.name(), self.n1, self.n2, self.r, fmt_f64(self.sigma))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub setting: String,
    pub variant: String,
    pub source: String,
    pub rel_t1: f64,
    pub rel_t2: f64,
    pub rel_rho: f64,
    pub outer_iterations: Option<usize>,
    pub final_objective: Option<f64>,
    pub final_data_term: Option<f64>,
    pub stop: Option<String>,
}

/// Published relative errors `(T1, T2, ρ)` for the 256×256, L = 100 experiments.
pub fn reference_rows() -> Vec<ReportRow> {
    let table: [(&str, [(&str, [f64; 3]); 4]); 2] = [
        (
            "reference 16x sigma=2",
            [
                ("blip", [0.231, 0.26, 0.25]),
                ("lm", [0.155, 0.177, 0.222]),
                ("one-step", [0.091, 0.09, 0.12]),
                ("nested", [0.086, 0.077, 0.12]),
            ],
        ),
        (
            "reference 32x sigma=5",
            [
                ("blip", [1.195, 0.733, 0.236]),
                ("lm", [0.838, 0.4, 0.305]),
                ("one-step", [0.192, 0.204, 0.136]),
                ("nested", [0.184, 0.185, 0.134]),
            ],
        ),
    ];
    table
        .iter()
        .flat_map(|(setting, rows)| {
            rows.iter().map(move |(v, e)| ReportRow {
                setting: setting.to_string(),
                variant: v.to_string(),
                source: "reference-only".into(),
                rel_t1: e[0],
                rel_t2: e[1],
                rel_rho: e[2],
                outer_iterations: None,
                final_objective: None,
                final_data_term: None,
                stop: None,
            })
        })
        .collect()
}

pub fn write_report(rows: &[ReportRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_report(path: &Path) -> Result<Vec<ReportRow>> {
    let mut r = csv::Reader::from_reader(open(path)?);
    Ok(r.deserialize().collect::<std::result::Result<Vec<ReportRow>, _>>()?)
}

fn measured_row(
    setting: &str,
    variant: Variant,
    recon: &ParameterImage,
    truth: &ParameterImage,
    trace: &[crate::solver::TraceRow],
    stop: Option<StopReason>,
) -> Result<ReportRow> {
    let last = trace.last().ok_or_else(|| Error::Config(format!("empty trace for {}", variant.name())))?;
    Ok(ReportRow {
        setting: setting.to_string(),
        variant: variant.name().into(),
        source: "measured".into(),
        rel_t1: relative_error(recon, truth, Channel::T1)?,
        rel_t2: relative_error(recon, truth, Channel::T2)?,
        rel_rho: relative_error(recon, truth, Channel::Rho)?,
        outer_iterations: Some(trace.len() - 1),
        final_objective: Some(last.objective),
        final_data_term: Some(last.data_term),
        stop: stop.map(|s| match s {
            StopReason::Converged => "converged".to_string(),
            StopReason::MaxOuter => "max_outer".to_string(),
        }),
    })
}

fn write_channel_pngs(dir: &Path, tag: &str, u: &ParameterImage, spec: &ExperimentSpec) -> Result<()> {
    for c in Channel::ALL {
        let j = c.index();
        let f = std::fs::File::create(dir.join(format!("{}_{tag}.png", c.name())))?;
        write_png(f, u.channel(c), spec.solver.bounds.lower[j], spec.solver.bounds.upper[j])?;
    }
    Ok(())
}

fn write_error_pngs(
    dir: &Path,
    tag: &str,
    u: &ParameterImage,
    truth: &ParameterImage,
    spec: &ExperimentSpec,
) -> Result<()> {
    for c in Channel::ALL {
        let err = (&u.channel(c) - &truth.channel(c)).mapv(f64::abs);
        let f = std::fs::File::create(dir.join(format!("error_{}_{tag}.png", c.name())))?;
        write_png(f, err.view(), 0.0, ERROR_FRACTION * spec.solver.bounds.upper[c.index()])?;
    }
    Ok(())
}

/// Writes `config_resolved.txt`, the phantom and the synthesized data.
pub fn simulate_to_dir(spec: &ExperimentSpec, dir: &Path) -> Result<(Phantom, KSpaceData)> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(dir.join("config_resolved.txt"), spec.to_kv().to_text())?;
    let phantom = spec.phantom()?;
    let data = spec.synthesize(&phantom.truth)?;
    write_parameter_image(std::fs::File::create(dir.join("truth.pim"))?, &phantom.truth)?;
    write_kspace(std::fs::File::create(dir.join("data.ksp"))?, &data, spec.mask_seed, spec.precision)?;
    write_channel_pngs(dir, "truth", &phantom.truth, spec)?;
    Ok((phantom, data))
}

/// Reconstructs `data.ksp` of a run directory with one variant and writes its
/// trace, reconstruction and images.
pub fn reconstruct_in_dir(spec: &ExperimentSpec, dir: &Path, variant: Variant) -> Result<SolveOutput> {
    let (data, _) = read_kspace(open(&dir.join("data.ksp"))?)?;
    if data.data.dim() != (spec.seq.len(), spec.n1, spec.n2) {
        return Err(Error::Config(format!(
            "data.ksp has shape {:?}, configuration expects ({}, {}, {})",
            data.data.dim(),
            spec.seq.len(),
            spec.n1,
            spec.n2
        )));
    }
    let started = std::time::Instant::now();
    let out = run_variant(variant, &data, &spec.seq, &spec.solver, None)?;
    log::info!(
        "{}: {} outer iterations, J = {:.6e}, {:.1} s",
        variant.name(),
        out.trace.len() - 1,
        out.trace.last().map_or(f64::NAN, |r| r.objective),
        started.elapsed().as_secs_f64()
    );
    let tag = variant.name();
    write_trace_file(&out.trace, &dir.join(format!("trace_{tag}.csv")))?;
    write_parameter_image(std::fs::File::create(dir.join(format!("recon_{tag}.pim")))?, &out.state.u)?;
    write_channel_pngs(dir, tag, &out.state.u, spec)?;
    let truth_path = dir.join("truth.pim");
    if truth_path.exists() {
        let truth = read_parameter_image(open(&truth_path)?)?;
        write_error_pngs(dir, tag, &out.state.u, &truth, spec)?;
    }
    std::fs::write(dir.join(format!("stop_{tag}.txt")), format!("{:?}\n", out.stop).to_lowercase())?;
    Ok(out)
}

/// Rebuilds the variant table of a run directory from its files.
pub fn compare_runs(dir: &Path) -> Result<Vec<ReportRow>> {
    let spec = ExperimentSpec::read(&dir.join("config_resolved.txt"), Preset::Desk)?;
    let truth = read_parameter_image(open(&dir.join("truth.pim"))?)?;
    let setting = spec.setting();
    let mut rows = Vec::new();
    for v in Variant::ALL {
        let recon_path = dir.join(format!("recon_{}.pim", v.name()));
        if !recon_path.exists() {
            continue;
        }
        let recon = read_parameter_image(open(&recon_path)?)?;
        let trace = read_trace_file(&dir.join(format!("trace_{}.csv", v.name())))?;
        let stop = match std::fs::read_to_string(dir.join(format!("stop_{}.txt", v.name()))) {
            Ok(s) if s.trim() == "converged" => Some(StopReason::Converged),
            Ok(s) if s.trim() == "maxouter" => Some(StopReason::MaxOuter),
            _ => None,
        };
        rows.push(measured_row(&setting, v, &recon, &truth, &trace, stop)?);
    }
    if rows.is_empty() {
        return Err(Error::Config(format!("no reconstructions found in {}", dir.display())));
    }
    rows.extend(reference_rows());
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct RunSummary {
    pub phantom: Phantom,
    pub rows: Vec<ReportRow>,
    pub outputs: Vec<(Variant, SolveOutput)>,
}

/// Simulate, reconstruct with every configured variant and write the report.
pub fn run_experiment(spec: &ExperimentSpec, dir: &Path) -> Result<RunSummary> {
    spec.validate()?;
    let (phantom, _) = simulate_to_dir(spec, dir)?;
    let mut outputs = Vec::new();
    for &v in &spec.variants {
        outputs.push((v, reconstruct_in_dir(spec, dir, v)?));
    }
    let rows = compare_runs(dir)?;
    write_report(&rows, &dir.join("report.csv"))?;
    Ok(RunSummary { phantom, rows, outputs })
}
