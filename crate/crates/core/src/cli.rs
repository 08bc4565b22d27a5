//! `npag` command-line front end.
//!
//! Exit codes: 0 success, 2 configuration or input error, 3 degenerate data,
//! 4 weight-solver cap (results are still written and flagged), 5 result and
//! configuration disagree, 1 anything else.

use std::ffi::OsString;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::config::RunConfig;
use crate::dataset::write_dataset;
use crate::error::{NpagError, Result};
use crate::models::ModelSpec;
use crate::npag::{run_npag, FitStatus};
use crate::optimality::{default_resolution, verify_optimality_with_surface, OptimalityReport};
use crate::psi::build_psi;
use crate::report::{marginal_svg, sha256_hex, support_table, FitReport, FORMAT_VERSION};
use crate::simulate::simulate_population;

pub const LOCK_FILE: &str = ".npag.lock";

#[derive(Debug, Parser)]
#[command(name = "npag", version, about = "Nonparametric maximum likelihood mixing distributions")]
pub struct Cli {
    /// Worker threads for likelihood evaluation (default: all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a population dataset from the `sim` section.
    Simulate(SimulateArgs),
    /// Estimate the mixing distribution from a dataset.
    Fit(FitArgs),
    /// Recompute the optimality certificate for a saved result.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `sim.seed`.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Overrides `npag.rng_seed`.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write Ψ on the final support as `psi.csv`.
    #[arg(long)]
    pub dump_psi: bool,
    /// Lattice points per axis for the optimality check.
    #[arg(long)]
    pub lattice: Option<usize>,
    /// Overlay a kernel-smoothed curve on the marginal plots.
    #[arg(long)]
    pub smooth: bool,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    #[arg(long)]
    pub result: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Defaults to the configuration echoed in the result.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Defaults to the directory holding the result.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub lattice: Option<usize>,
    /// Pass threshold per subject; defaults to `npag.check_tolerance`.
    #[arg(long)]
    pub tolerance: Option<f64>,
    /// Also write the D values on the lattice as `surface.csv`.
    #[arg(long)]
    pub surface: bool,
}

pub fn exit_code(err: &NpagError) -> u8 {
    match err {
        NpagError::DegenerateSubject { .. } | NpagError::ZeroMixtureLikelihood { .. } => 3,
        NpagError::IterationLimit { .. } => 4,
        NpagError::Mismatch(_) => 5,
        NpagError::Config(_)
        | NpagError::Data { .. }
        | NpagError::Subject { .. }
        | NpagError::ParameterSpace(_)
        | NpagError::Model(_)
        | NpagError::Dimension(_)
        | NpagError::OutsideBox { .. }
        | NpagError::Json(_)
        | NpagError::Csv(_)
        | NpagError::Io(_) => 2,
        NpagError::NonFinite(_) | NpagError::Solver(_) => 1,
    }
}

/// Exclusive claim on an output directory, released on drop.
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)
            .map_err(|e| NpagError::Config(format!("cannot create output directory {}: {e}", dir.display())))?;
        let path = dir.join(LOCK_FILE);
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                let _ = writeln!(f, "{}", std::process::id());
                Ok(Self { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(NpagError::Config(format!(
                "output directory {} is in use by another run (delete {} if stale)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(NpagError::Config(format!("output directory {} is not writable: {e}", dir.display()))),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn out_dir(flag: &Option<PathBuf>, config: &RunConfig) -> PathBuf {
    flag.clone().or_else(|| config.out.clone()).unwrap_or_else(|| PathBuf::from("."))
}

fn init_logging(config: &RunConfig) {
    let _ = env_logger::Builder::new()
        .filter_level(config.verbosity.level())
        .parse_default_env()
        .format_timestamp(None)
        .try_init();
}

fn file_stem(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect()
}

#[derive(Serialize)]
struct SimulationManifest<'a> {
    format_version: u32,
    seed: u64,
    config: &'a RunConfig,
    data_file: &'a str,
    data_sha256: String,
    n_subjects: usize,
    parameter_names: [&'a str; 2],
    /// Generating `(K, Vol)` per subject, in file order.
    parameters: &'a [[f64; 2]],
}

pub fn cmd_simulate(args: &SimulateArgs) -> Result<PathBuf> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.sim.seed = seed;
    }
    init_logging(&config);
    if let ModelSpec::PkOneCompartment(pk) = &config.model {
        if pk.dose != config.sim.dose {
            return Err(NpagError::Config(format!(
                "sim.dose = {} but model.dose = {}; simulated files carry no dose rows, so fits would use the wrong bolus",
                config.sim.dose, pk.dose
            )));
        }
    }
    let population = simulate_population(&config.sim, &config.bounds)?;
    let mut data = Vec::new();
    write_dataset(&mut data, &population.subjects)?;

    let dir = out_dir(&args.out, &config);
    let _lock = OutputLock::acquire(&dir)?;
    let data_path = dir.join("data.csv");
    fs::write(&data_path, &data)?;
    let manifest = SimulationManifest {
        format_version: FORMAT_VERSION,
        seed: config.sim.seed,
        config: &config,
        data_file: "data.csv",
        data_sha256: sha256_hex(&data),
        n_subjects: population.subjects.len(),
        parameter_names: ["K", "Vol"],
        parameters: &population.parameters,
    };
    write_json(&dir.join("manifest.json"), &manifest)?;
    log::info!("wrote {} subjects to {}", population.subjects.len(), data_path.display());
    Ok(data_path)
}

/// Runs a fit and writes its artifacts. Returns the report and whether the
/// weight solver hit its cap.
pub fn cmd_fit(args: &FitArgs) -> Result<(FitReport, bool)> {
    let mut config = RunConfig::load(&args.config)?;
    if let Some(seed) = args.seed {
        config.npag.rng_seed = seed;
    }
    if let Some(res) = args.lattice {
        config.npag.check_resolution = Some(res);
    }
    config.validate()?;
    init_logging(&config);
    let raw = fs::read(&args.data)
        .map_err(|e| NpagError::Config(format!("cannot read data file {}: {e}", args.data.display())))?;
    let subjects = crate::dataset::read_dataset(raw.as_slice())?;
    let model = config.population_model()?;

    let dir = out_dir(&args.out, &config);
    let _lock = OutputLock::acquire(&dir)?;
    let fit = run_npag(&model, &subjects, &config.npag)?;
    let capped = fit.status == FitStatus::SolverLimit;
    let report = FitReport::new(&config, &raw, subjects.len(), fit);

    write_json(&dir.join("result.json"), &report)?;
    let names = config.bounds.names();
    let dist = report.distribution();
    fs::write(dir.join("table.txt"), support_table(&dist, &names, report.log_likelihood))?;
    for (axis, name) in names.iter().enumerate() {
        let svg = marginal_svg(&dist, &config.bounds, axis, args.smooth);
        fs::write(dir.join(format!("marginal_{}.svg", file_stem(name))), svg)?;
    }
    if args.dump_psi {
        let psi = build_psi(&model, &subjects, &dist.support)?;
        let ids: Vec<&str> = subjects.iter().map(|s| s.id.as_str()).collect();
        psi.write_csv(std::io::BufWriter::new(File::create(dir.join("psi.csv"))?), &ids, &names)?;
    }
    Ok((report, capped))
}

#[derive(Debug, Serialize)]
pub struct CheckOutput {
    pub format_version: u32,
    pub result_file: String,
    pub data_sha256: String,
    pub data_matches_result: bool,
    pub report: OptimalityReport,
}

pub fn cmd_check(args: &CheckArgs) -> Result<CheckOutput> {
    let text = fs::read_to_string(&args.result)
        .map_err(|e| NpagError::Config(format!("cannot read result {}: {e}", args.result.display())))?;
    let result: FitReport = serde_json::from_str(&text)
        .map_err(|e| NpagError::Config(format!("{} is not a fit result: {e}", args.result.display())))?;
    let config = match &args.config {
        Some(path) => {
            let config = RunConfig::load(path)?;
            if config.model != result.config.model {
                return Err(NpagError::Mismatch(format!("model in {} differs from the fitted model", path.display())));
            }
            if config.bounds != result.config.bounds {
                return Err(NpagError::Mismatch(format!("bounds in {} differ from the fitted bounds", path.display())));
            }
            config
        }
        None => result.config.clone(),
    };
    init_logging(&config);
    let dim = config.bounds.dim();
    if result.support.iter().any(|p| p.len() != dim) || result.support.len() != result.weights.len() {
        return Err(NpagError::Mismatch("support points do not match the parameter space".into()));
    }
    let raw = fs::read(&args.data)
        .map_err(|e| NpagError::Config(format!("cannot read data file {}: {e}", args.data.display())))?;
    let data_sha256 = sha256_hex(&raw);
    let data_matches_result = data_sha256 == result.data_sha256;
    if !data_matches_result {
        log::warn!("data file hash differs from the one recorded in the result");
    }
    let subjects = crate::dataset::read_dataset(raw.as_slice())?;
    let model = config.population_model()?;
    let resolution = args
        .lattice
        .or(config.npag.check_resolution)
        .unwrap_or_else(|| default_resolution(dim));
    let tolerance = args.tolerance.unwrap_or(config.npag.check_tolerance);
    if !(tolerance >= 0.0 && tolerance.is_finite()) {
        return Err(NpagError::Config(format!("tolerance must be finite and ≥ 0, got {tolerance}")));
    }

    let dir = args
        .out
        .clone()
        .unwrap_or_else(|| match args.result.parent() {
            Some(p) if !p.as_os_str().is_empty() => p.to_path_buf(),
            _ => PathBuf::from("."),
        });
    let _lock = OutputLock::acquire(&dir)?;
    let (report, surface) =
        verify_optimality_with_surface(&result.distribution(), &model, &subjects, resolution, tolerance)?;
    let output = CheckOutput {
        format_version: FORMAT_VERSION,
        result_file: args.result.display().to_string(),
        data_sha256,
        data_matches_result,
        report,
    };
    write_json(&dir.join("check.json"), &output)?;
    if args.surface {
        let mut w = csv::Writer::from_writer(std::io::BufWriter::new(File::create(dir.join("surface.csv"))?));
        let mut header: Vec<&str> = config.bounds.names();
        header.push("d");
        w.write_record(&header)?;
        for (theta, d) in &surface {
            let mut row: Vec<String> = theta.iter().map(f64::to_string).collect();
            row.push(d.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
    }
    Ok(output)
}

fn configure_threads(threads: Option<usize>) -> Result<()> {
    if let Some(n) = threads {
        if n == 0 {
            return Err(NpagError::Config("--threads must be at least 1".into()));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| NpagError::Config(format!("cannot configure thread pool: {e}")))?;
    }
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<u8> {
    configure_threads(cli.threads)?;
    match &cli.command {
        Command::Simulate(args) => {
            let path = cmd_simulate(args)?;
            println!("{}", path.display());
            Ok(0)
        }
        Command::Fit(args) => {
            let (report, capped) = cmd_fit(args)?;
            println!(
                "status {:?} loglik {:.6} support {} d_max {:.3e} certificate {}",
                report.status,
                report.log_likelihood,
                report.weights.len(),
                report.optimality.d_max,
                if report.optimality.pass { "pass" } else { "fail" }
            );
            Ok(if capped { 4 } else { 0 })
        }
        Command::Check(args) => {
            let out = cmd_check(args)?;
            println!(
                "d_max {:.3e} threshold {:.3e} lattice {} certificate {}",
                out.report.d_max,
                out.report.threshold,
                out.report.check_grid_size,
                if out.report.pass { "pass" } else { "fail" }
            );
            Ok(0)
        }
    }
}

/// Parses `args` and runs the requested subcommand.
pub fn run<I, T>(args: I) -> ExitCode
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match dispatch(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
