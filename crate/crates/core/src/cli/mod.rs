//! `ordlvm` command-line front end.
//!
//! Exit codes: 0 success (and a valid fit for `fit`), 2 fit completed but
//! invalid, 1 input or runtime error.

pub mod io;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::em::{fit, FitConfig, InitPolicy};
use crate::error::{Error, Result};
use crate::integrate::ApproximationMethod;
use crate::sim::{density_grid, diagnose, generate, run_study};

use io::{format_diagnostics, format_fit_report, format_study_report, read_dataset_file, write_dataset, ScenarioFile};

/// Environment variable read for the worker count when `--threads` is absent.
pub const THREADS_ENV: &str = "ORDLVM_THREADS";

#[derive(Debug, Parser)]
#[command(name = "ordlvm", version, about = "Ordinal latent variable models: fit, simulate, study, diagnose")]
pub struct Cli {
    /// Worker threads (0 = one per core).
    #[arg(long, global = true, env = THREADS_ENV)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Fit a model to a response file.
    Fit(FitArgs),
    /// Generate datasets from a scenario file.
    Simulate(SimulateArgs),
    /// Run a replicate study and tabulate mean, bias and MSE.
    Study(StudyArgs),
    /// Posterior skewness/kurtosis diagnostics for a scenario population.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Tolerances {
    /// Maximum EM iterations.
    #[arg(long, default_value_t = 500)]
    pub max_iter: usize,
    /// Convergence tolerance on the largest parameter change.
    #[arg(long, default_value_t = 1e-4)]
    pub param_tol: f64,
    /// Convergence tolerance on the log-likelihood change.
    #[arg(long, default_value_t = 1e-6)]
    pub loglik_tol: f64,
}

impl Tolerances {
    fn config(&self, method: ApproximationMethod, seed: u64) -> FitConfig {
        FitConfig {
            method,
            max_em_iter: self.max_iter,
            param_tol: self.param_tol,
            loglik_tol: self.loglik_tol,
            seed,
            ..FitConfig::default()
        }
    }
}

#[derive(Debug, Args)]
pub struct FitArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub q: usize,
    /// laplace | fla | gh | agh-mode | agh-mean (optionally `name:K`).
    #[arg(long)]
    pub method: ApproximationMethod,
    /// Quadrature points per dimension.
    #[arg(long)]
    pub points: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Jitter free starting loadings uniformly by this amount (uses the seed).
    #[arg(long)]
    pub jitter: Option<f64>,
    /// Categories per item, comma-separated; inferred from the data if absent.
    #[arg(long, value_delimiter = ',')]
    pub categories: Option<Vec<usize>>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub tol: Tolerances,
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Number of datasets; defaults to the scenario's replicate count.
    #[arg(long)]
    pub replicates: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StudyArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub replicates: Option<usize>,
    /// Comma-separated methods, e.g. `fla,agh-mode:5`.
    #[arg(long, value_delimiter = ',')]
    pub methods: Option<Vec<ApproximationMethod>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Text report; a JSON copy is written next to it with `.json` appended.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub tol: Tolerances,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[arg(long)]
    pub scenario: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Population size; defaults to the scenario's `n`.
    #[arg(long)]
    pub n: Option<usize>,
    /// Overrides the effective sample size of the significance tests.
    #[arg(long)]
    pub effective_n: Option<f64>,
    #[arg(long)]
    pub out: PathBuf,
    /// Write posterior density grids of the least and most skewed observations (q = 2).
    #[arg(long)]
    pub grid: Option<PathBuf>,
}

/// Result of a successful command.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Ok,
    InvalidFit,
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text)?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_fit(args: &FitArgs) -> Result<Outcome> {
    let data = read_dataset_file(&args.data, args.categories.clone())?;
    let method = match args.points {
        Some(_) if !args.method.is_quadrature() => {
            return Err(Error::InvalidInput(format!("--points does not apply to {}", args.method)))
        }
        Some(k) => args.method.with_points(k),
        None => args.method,
    };
    let mut config = args.tol.config(method, args.seed);
    if let Some(spread) = args.jitter {
        config.init = InitPolicy::Jittered { loading: 0.5, spread };
    }
    let result = fit(&data, args.q, &config)?;
    eprintln!("fit: {} iterations in {:.2?}", result.iterations, result.elapsed);
    write_output(args.out.as_deref(), &format_fit_report(&result, &data, method))?;
    Ok(if result.valid { Outcome::Ok } else { Outcome::InvalidFit })
}

fn cmd_simulate(args: &SimulateArgs) -> Result<Outcome> {
    let file = ScenarioFile::read(&args.scenario)?;
    let mut spec = file.spec()?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let count = args.replicates.unwrap_or(spec.replicates).max(1);
    std::fs::create_dir_all(&args.out)?;
    for r in 0..count {
        let data = generate(&spec, r as u64)?;
        let path = args.out.join(format!("data_{r:03}.csv"));
        write_dataset(std::io::BufWriter::new(std::fs::File::create(path)?), &data)?;
    }
    eprintln!("simulate: wrote {count} datasets to {}", args.out.display());
    Ok(Outcome::Ok)
}

fn cmd_study(args: &StudyArgs) -> Result<Outcome> {
    let file = ScenarioFile::read(&args.scenario)?;
    let mut spec = file.spec()?;
    if let Some(r) = args.replicates {
        spec.replicates = r;
    }
    if let Some(m) = &args.methods {
        spec.methods = m.clone();
    }
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    let base = args.tol.config(ApproximationMethod::Fla, spec.seed);
    base.validate()?;
    let report = run_study(&spec, &base)?;
    for m in &report.methods {
        eprintln!("study: {} total fit time {:.2?}", m.method, m.elapsed);
    }
    std::fs::write(&args.out, format_study_report(&report))?;
    let mut json_path = args.out.clone().into_os_string();
    json_path.push(".json");
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::Numerical(e.to_string()))?;
    std::fs::write(json_path, json + "\n")?;
    Ok(Outcome::Ok)
}

fn cmd_diagnose(args: &DiagnoseArgs) -> Result<Outcome> {
    let file = ScenarioFile::read(&args.scenario)?;
    let mut spec = file.spec()?;
    if let Some(seed) = args.seed {
        spec.seed = seed;
    }
    if let Some(n) = args.n {
        spec.n = n;
    }
    let mut config = file.mardia_config();
    if let Some(e) = args.effective_n {
        config.effective_n = e;
    }
    let data = generate(&spec, 0)?;
    let diag = diagnose(&spec.params, &data, &config)?;
    std::fs::write(&args.out, format_diagnostics(&diag, &data, &config))?;
    if let Some(grid) = &args.grid {
        let by_skew = |best: bool| {
            (0..data.n())
                .reduce(|a, b| {
                    let keep_b = if best { diag.beta1[b] > diag.beta1[a] } else { diag.beta1[b] < diag.beta1[a] };
                    if keep_b {
                        b
                    } else {
                        a
                    }
                })
                .unwrap_or(0)
        };
        let mut text = String::from("obs,beta1,z1,z2,density\n");
        for l in [by_skew(false), by_skew(true)] {
            for [z1, z2, d] in density_grid(&spec.params, data.pattern(l), -4.0, 4.0, 41)? {
                text.push_str(&format!("{},{:.6},{z1:.4},{z2:.4},{d:.6e}\n", l + 1, diag.beta1[l]));
            }
        }
        std::fs::write(grid, text)?;
    }
    Ok(Outcome::Ok)
}

/// Runs a parsed command line.
pub fn run(cli: &Cli) -> Result<Outcome> {
    if let Some(n) = cli.threads {
        // The global pool can only be built once per process.
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    match &cli.command {
        Command::Fit(a) => cmd_fit(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Study(a) => cmd_study(a),
        Command::Diagnose(a) => cmd_diagnose(a),
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            // usage errors are input errors (exit 1); help and version succeed
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(Outcome::Ok) => ExitCode::SUCCESS,
        Ok(Outcome::InvalidFit) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
