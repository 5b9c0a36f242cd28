//! `qmri` command-line front end.
//!
//! Exit status is 0 on success, 1 for configuration and input errors and 2 for
//! numerical failures (QP or backtracking caps, failed trace diagnostics). On
//! failure stderr carries one line `error code=<CODE> msg=<message>`.

use std::io::Write as _;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{fmt_f64, KeyValues};
use crate::data::{
    compare_runs, reconstruct_in_dir, simulate_to_dir, write_parameter_image, write_png, write_report, ExperimentSpec,
};
use crate::error::{Error, Result};
use crate::forward::Channel;
use crate::solver::{diagnose, read_trace_file, Preset, Variant};

#[derive(Debug, Parser)]
#[command(name = "qmri", version, about = "Quantitative MRI reconstruction from undersampled k-space data")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a ground-truth phantom.
    Phantom(CommonArgs),
    /// Write a phantom and its noisy undersampled k-space data.
    Simulate(CommonArgs),
    /// Reconstruct the data of a run directory.
    Reconstruct(CommonArgs),
    /// Print and save the relative-error table of a run directory.
    Compare(DirArgs),
    /// Check the convergence invariants of saved traces.
    Diagnose(DirArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output (run) directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Master seed; subsystem seeds are derived from it.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Algorithm variant: nested, one-step or lm.
    #[arg(long)]
    pub variant: Option<String>,
    /// Parameter preset: paper16x, paper32x or desk.
    #[arg(long)]
    pub preset: Option<String>,
    /// Image side length.
    #[arg(long)]
    pub size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct DirArgs {
    /// Run directory (alternatively `--out`).
    pub dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Restrict to one variant.
    #[arg(long)]
    pub variant: Option<String>,
}

impl DirArgs {
    fn dir(&self) -> Result<&Path> {
        self.dir.as_deref().or(self.out.as_deref()).ok_or_else(|| Error::Config("a run directory is required".into()))
    }
}

const SUB_SEEDS: [&str; 4] = ["data.phantom_seed", "data.noise_seed", "data.mask_seed", "seq.seed"];

/// Configuration file (if any) with the command-line overrides applied.
fn load_spec(args: &CommonArgs, default_config: Option<&Path>) -> Result<ExperimentSpec> {
    let mut kv = match args.config.as_deref().or(default_config) {
        Some(p) => KeyValues::read(p)?,
        None => KeyValues::new(),
    };
    if let Some(p) = &args.preset {
        kv.set("data.preset", Preset::parse(p)?.name());
    }
    if let Some(seed) = args.seed {
        kv.set("data.seed", seed.to_string());
        for k in SUB_SEEDS {
            kv.take_raw(k);
        }
    }
    if let Some(n) = args.size {
        kv.take_raw("data.size");
        kv.set("data.n1", n.to_string());
        kv.set("data.n2", n.to_string());
    }
    ExperimentSpec::from_kv(kv, Preset::Desk)
}

fn parse_variant(v: &Option<String>) -> Result<Option<Variant>> {
    v.as_deref().map(Variant::parse).transpose()
}

fn cmd_phantom(args: &CommonArgs) -> Result<()> {
    let spec = load_spec(args, None)?;
    std::fs::create_dir_all(&args.out)?;
    std::fs::write(args.out.join("config_resolved.txt"), spec.to_kv().to_text())?;
    let ph = spec.phantom()?;
    write_parameter_image(std::fs::File::create(args.out.join("truth.pim"))?, &ph.truth)?;
    for c in Channel::ALL {
        let j = c.index();
        let f = std::fs::File::create(args.out.join(format!("{}_truth.png", c.name())))?;
        write_png(f, ph.truth.channel(c), spec.solver.bounds.lower[j], spec.solver.bounds.upper[j])?;
    }
    let mut w = csv::Writer::from_path(args.out.join("phantom.csv"))?;
    w.write_record(["label", "name", "center_row", "center_col", "axis_row", "axis_col", "angle", "rho", "t1", "t2"])?;
    let bg = ph.descriptor.background;
    w.write_record(["0", "background", "", "", "", "", "", &fmt_f64(bg[0]), &fmt_f64(bg[1]), &fmt_f64(bg[2])])?;
    for (s, e) in ph.descriptor.shapes.iter().enumerate() {
        w.write_record([
            (s + 1).to_string(),
            e.name.to_string(),
            fmt_f64(e.center.0),
            fmt_f64(e.center.1),
            fmt_f64(e.axes.0),
            fmt_f64(e.axes.1),
            fmt_f64(e.angle),
            fmt_f64(e.value[0]),
            fmt_f64(e.value[1]),
            fmt_f64(e.value[2]),
        ])?;
    }
    w.flush()?;
    println!("phantom {}x{} seed {} -> {}", spec.n1, spec.n2, spec.phantom_seed, args.out.display());
    Ok(())
}

fn cmd_simulate(args: &CommonArgs) -> Result<()> {
    let spec = load_spec(args, None)?;
    let (_, data) = simulate_to_dir(&spec, &args.out)?;
    println!(
        "simulated {}x{}x{} (r = {}, {} samples) -> {}",
        spec.n1,
        spec.n2,
        spec.seq.len(),
        spec.r,
        data.masks.total_sampled(),
        args.out.display()
    );
    Ok(())
}

fn cmd_reconstruct(args: &CommonArgs) -> Result<()> {
    let resolved = args.out.join("config_resolved.txt");
    if args.config.is_none() && !resolved.exists() {
        return Err(Error::Config(format!("{} not found; run `simulate` first or pass --config", resolved.display())));
    }
    let mut spec = load_spec(args, Some(&resolved))?;
    if let Some(v) = parse_variant(&args.variant)? {
        spec.variants = vec![v];
    }
    std::fs::write(&resolved, spec.to_kv().to_text())?;
    for &v in &spec.variants {
        let out = reconstruct_in_dir(&spec, &args.out, v)?;
        let last = out.trace.last().expect("trace has the initial row");
        println!("{}: {} iterations, J = {:.6e}, stop = {:?}", v.name(), out.trace.len() - 1, last.objective, out.stop);
    }
    if args.out.join("truth.pim").exists() {
        write_report(&compare_runs(&args.out)?, &args.out.join("report.csv"))?;
    }
    Ok(())
}

fn cmd_compare(args: &DirArgs) -> Result<()> {
    let dir = args.dir()?;
    let mut rows = compare_runs(dir)?;
    if let Some(v) = parse_variant(&args.variant)? {
        rows.retain(|r| r.source != "measured" || r.variant == v.name());
    }
    write_report(&rows, &dir.join("report.csv"))?;
    let mut w = csv::Writer::from_writer(std::io::stdout());
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

fn cmd_diagnose(args: &DirArgs) -> Result<()> {
    let dir = args.dir()?;
    let variants = match parse_variant(&args.variant)? {
        Some(v) => vec![v],
        None => Variant::ALL.into_iter().filter(|v| dir.join(format!("trace_{}.csv", v.name())).exists()).collect(),
    };
    if variants.is_empty() {
        return Err(Error::Config(format!("no traces found in {}", dir.display())));
    }
    let mut failed = Vec::new();
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    for v in variants {
        let trace = read_trace_file(&dir.join(format!("trace_{}.csv", v.name())))?;
        for c in diagnose(&trace)? {
            let status = if c.passed { "PASS" } else { "FAIL" };
            writeln!(out, "{} {} {} {}", v.name(), c.name, status, c.detail)?;
            if !c.passed {
                failed.push(format!("{}:{}@{}", v.name(), c.name, c.violation.map_or(-1, |k| k as i64)));
            }
        }
    }
    if failed.is_empty() {
        Ok(())
    } else {
        Err(Error::DiagnosticsFailed(failed.join(",")))
    }
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("QMRI_THREADS") {
        let n: usize = v.trim().parse().map_err(|_| Error::Config(format!("QMRI_THREADS = `{v}` is not a count")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(format!("cannot size the thread pool: {e}")))?;
    }
    Ok(())
}

pub fn run(cli: Cli) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Phantom(a) => cmd_phantom(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Compare(a) => cmd_compare(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

/// Exit status for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_numerical() {
        2
    } else {
        1
    }
}

/// Parses `argv`, runs the command and returns the process exit status.
pub fn main_with_args<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error code=USAGE msg={first}");
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error code={} msg={}", e.code(), e.to_string().replace('\n', " "));
            exit_code(&e)
        }
    }
}
