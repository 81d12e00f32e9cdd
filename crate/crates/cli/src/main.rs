//! `labelshift`: estimate label-shift importance weights from predictor
//! output files.

mod commands;
mod config;
mod error;
mod io;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use labelshift_core::estimators::{method_names, Method};
use labelshift_core::simulation::{CalibrationSpec, PredictorSpec};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "labelshift", version, about = "Label-shift estimation from black-box predictor outputs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw a two-Gaussian source/target pair and write oracle predictor outputs.
    Simulate(SimulateArgs),
    /// Estimate importance weights w(y) = p_t(y) / p_s(y).
    Estimate(EstimateArgs),
    /// Fit bias-corrected temperature scaling on held-out source outputs.
    Calibrate(CalibrateArgs),
    /// Curvature, calibration error and bound terms at given or estimated weights.
    Diagnose(DiagnoseArgs),
    /// Monte Carlo MSE table over shifts, sample sizes and methods.
    Benchmark(BenchmarkArgs),
}

#[derive(Debug, Args)]
struct Common {
    /// JSON run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct InputFiles {
    /// Labeled source predictions (CSV with a "label" column).
    #[arg(long)]
    source: Option<PathBuf>,
    /// Unlabeled target predictions (CSV).
    #[arg(long)]
    target: Option<PathBuf>,
    /// Skip BCTS calibration before the likelihood methods.
    #[arg(long)]
    no_calibration: bool,
    /// Clip negative moment-matching solutions onto the weight simplex.
    #[arg(long)]
    clip_negative: bool,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Output directory for source.csv, target.csv and target_marginal.json.
    #[arg(long)]
    output: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    /// Class means are -mu and +mu.
    #[arg(long)]
    mu: Option<f64>,
    /// Dirichlet concentration of the target marginal.
    #[arg(long)]
    alpha: Option<f64>,
    /// Fixed target marginal, comma separated.
    #[arg(long, value_delimiter = ',', num_args = 1..)]
    target_marginal: Option<Vec<f64>>,
    #[arg(long)]
    n_source: Option<usize>,
    /// Target sample size.
    #[arg(long)]
    m: Option<usize>,
    /// Replace the oracle by its average over this many equal-width bins.
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Debug, Args)]
struct EstimateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    files: InputFiles,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CalibrateArgs {
    #[command(flatten)]
    common: Common,
    /// Labeled predictions; the fit uses the validation split at the end.
    #[arg(long)]
    source: Option<PathBuf>,
    /// Predictions to rewrite with the fitted map (requires --output).
    #[arg(long, requires = "output")]
    apply: Option<PathBuf>,
    /// Destination of the calibrated --apply file.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Equal-width bins for the calibration-error estimate.
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Debug, Args)]
struct DiagnoseArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    files: InputFiles,
    /// Evaluate at these weights instead of estimating.
    #[arg(long, value_delimiter = ',', num_args = 1.., conflicts_with = "method")]
    weights: Option<Vec<f64>>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Equal-width bins for the calibration-error estimate.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct BenchmarkArgs {
    #[command(flatten)]
    common: Common,
    /// Start from a built-in experiment instead of the config's benchmark section.
    #[arg(long, value_parser = ["gmm"])]
    preset: Option<String>,
    /// Methods to compare (comma separated); replaces the configured list.
    #[arg(long, value_delimiter = ',', value_parser = parse_method, num_args = 1..)]
    method: Option<Vec<Method>>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_trials: Option<usize>,
    /// Binned oracle predictor with this many bins.
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    no_calibration: bool,
    #[arg(long)]
    clip_negative: bool,
    /// Write the CSV here; the JSON summary then goes to stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse().map_err(|_| format!("unknown method {s:?}; expected one of {}", method_names()))
}

impl InputFiles {
    fn apply(&self, config: &mut RunConfig) {
        if let Some(p) = &self.source {
            config.source.path = Some(p.clone());
        }
        if let Some(p) = &self.target {
            config.target.path = Some(p.clone());
        }
        if self.no_calibration {
            config.calibration.enabled = false;
        }
        if self.clip_negative {
            config.method.clip_negative = true;
        }
    }
}

fn load(common: &Common) -> CliResult<RunConfig> {
    RunConfig::load_or_default(common.config.as_deref())
}

fn run(command: Command) -> CliResult<()> {
    match command {
        Command::Simulate(args) => {
            let config = load(&args.common)?;
            let mut experiment = config.benchmark;
            let shift = commands::simulation_shift(args.alpha, args.target_marginal, &experiment.shifts)?;
            experiment.shifts = vec![shift];
            if let Some(seed) = args.seed {
                experiment.base_seed = seed;
            }
            if let Some(mu) = args.mu {
                experiment.dataset.mu = mu;
            }
            if let Some(n) = args.n_source {
                experiment.dataset.n_source = n;
            }
            if let Some(m) = args.m {
                experiment.sizes = vec![m];
            }
            experiment.sizes.truncate(1);
            if let Some(bins) = args.bins {
                experiment.dataset.predictor = PredictorSpec::Binned { bins };
            }
            experiment.n_trials = 1;
            let summary = commands::simulate(&experiment, &args.output)?;
            io::write_json(&summary, None)
        }
        Command::Estimate(args) => {
            let mut config = load(&args.common)?;
            args.files.apply(&mut config);
            if let Some(m) = args.method {
                config.method.method = m;
            }
            config.validate()?;
            let report = commands::estimate_cmd(&config)?;
            io::write_json(&report, args.output.as_deref())
        }
        Command::Calibrate(args) => {
            let mut config = load(&args.common)?;
            if let Some(p) = args.source {
                config.source.path = Some(p);
            }
            if let Some(bins) = args.bins {
                config.diagnostics.bins = bins;
            }
            config.validate()?;
            let (report, applied) = commands::calibrate_cmd(&config, args.apply.as_deref())?;
            if let (Some(file), Some(out)) = (applied, args.output.as_deref()) {
                file.write(out)?;
            }
            io::write_json(&report, None)
        }
        Command::Diagnose(args) => {
            let mut config = load(&args.common)?;
            args.files.apply(&mut config);
            if let Some(m) = args.method {
                config.method.method = m;
            }
            if let Some(bins) = args.bins {
                config.diagnostics.bins = bins;
            }
            config.validate()?;
            let report = commands::diagnose_cmd(&config, args.weights.as_deref())?;
            io::write_json(&report, args.output.as_deref())
        }
        Command::Benchmark(args) => {
            let config = load(&args.common)?;
            let mut experiment = match args.preset.as_deref() {
                Some(_) => config::gmm_preset(),
                None => config.benchmark,
            };
            if let Some(methods) = args.method {
                experiment.methods = methods;
            }
            if let Some(seed) = args.seed {
                experiment.base_seed = seed;
            }
            if let Some(n) = args.n_trials {
                experiment.n_trials = n;
            }
            if let Some(bins) = args.bins {
                experiment.dataset.predictor = PredictorSpec::Binned { bins };
            }
            if args.no_calibration {
                experiment.calibration = CalibrationSpec::None;
            }
            if args.clip_negative {
                experiment.estimator.clip_negative = true;
            }
            let (csv, summary) = commands::benchmark_cmd(&experiment)?;
            match args.output.as_deref() {
                Some(path) => {
                    io::write_text(&csv, Some(path))?;
                    io::write_json(&summary, None)
                }
                None => {
                    io::write_text(&csv, None)?;
                    eprintln!("{}", serde_json::to_string(&summary).unwrap_or_default());
                    Ok(())
                }
            }
        }
    }
}

fn fail(err: &CliError) -> ExitCode {
    eprintln!("{}", err.to_json());
    ExitCode::from(err.kind.exit_code())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) => e.exit(),
        Err(e) => return fail(&CliError::input(e.render().to_string().trim_end())),
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

