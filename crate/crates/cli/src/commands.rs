//! Subcommand bodies. Each returns the document to print; `main` handles
//! argument parsing, output and exit codes.

use std::path::Path;

use labelshift_core::calibration::{bcts_apply, bcts_fit, clip_for_log, estimate_calibration_error, BctsFit};
use labelshift_core::diagnostics::{compute_bound_terms, diagnose, eigenvalue_sandwich_check, BoundInputs, DiagnosticsReport, SandwichReport};
use labelshift_core::estimators::{estimate, EstimateResult, EstimationData, EstimatorConfig, Method};
use labelshift_core::predictors::{bin_aggregate, BinStatistic};
use labelshift_core::simulation::{aggregate, generate_trial, run_trial, ExperimentConfig, MseRow, ShiftSpec, TrialIndex, TrialReport};
use labelshift_core::{LabeledSample, PredictorTable, ProbVector, WeightVector};
use rayon::prelude::*;
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::RunConfig;
use crate::error::{CliError, CliResult, Kind};
use crate::io::{check_same_classes, PredictionFile};

/// Environment variable capping the benchmark worker threads.
pub const THREADS_ENV: &str = "LABELSHIFT_THREADS";

pub const SOURCE_FILE: &str = "source.csv";
pub const TARGET_FILE: &str = "target.csv";
pub const MARGINAL_FILE: &str = "target_marginal.json";

fn class_names(k: usize) -> Vec<String> {
    (0..k).map(|c| c.to_string()).collect()
}

/// Writes one simulated trial: labeled source and unlabeled target outputs
/// of the configured predictor, plus the drawn target marginal.
pub fn simulate(experiment: &ExperimentConfig, dir: &Path) -> CliResult<Value> {
    experiment.validate()?;
    let data = generate_trial(experiment, TrialIndex { shift: 0, size: 0, trial: 0 })?;
    let classes = class_names(data.source_marginal.len());
    let source = PredictionFile {
        classes: classes.clone(),
        outputs: data.source.iter().map(|s| s.output.clone()).collect(),
        labels: Some(data.source.iter().map(|s| s.label).collect()),
    };
    let target = PredictionFile { classes, outputs: data.target.iter().map(|s| s.output.clone()).collect(), labels: None };
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    source.write(&dir.join(SOURCE_FILE))?;
    target.write(&dir.join(TARGET_FILE))?;
    let sidecar = json!({
        "seed": experiment.base_seed,
        "shift": experiment.shifts[0],
        "target_marginal": data.target_marginal,
        "source_marginal": data.source_marginal,
        "w_star": data.w_star.as_slice(),
    });
    crate::io::write_json(&sidecar, Some(&dir.join(MARGINAL_FILE)))?;
    Ok(json!({
        "source": dir.join(SOURCE_FILE),
        "target": dir.join(TARGET_FILE),
        "marginal": dir.join(MARGINAL_FILE),
        "n_source": source.outputs.len(),
        "n_target": target.outputs.len(),
        "target_marginal": data.target_marginal,
    }))
}

/// Source and target files with everything derived from them up front.
pub struct Inputs {
    pub source: PredictionFile,
    pub target: PredictionFile,
    pub samples: Vec<LabeledSample>,
    pub source_marginal: ProbVector,
}

pub fn load_inputs(config: &RunConfig) -> CliResult<Inputs> {
    let source_path =
        config.source.path.as_deref().ok_or_else(|| CliError::input("no source file: pass --source or set source.path"))?;
    let target_path =
        config.target.path.as_deref().ok_or_else(|| CliError::input("no target file: pass --target or set target.path"))?;
    let source = PredictionFile::read(source_path)?;
    let target = PredictionFile::read(target_path)?;
    check_same_classes(&source, &target)?;
    let samples = source.labeled_samples()?;
    let source_marginal = match &config.source.marginal {
        Some(p) if p.len() != source.num_classes() => {
            return Err(CliError::input(format!(
                "source.marginal has {} entries for {} classes",
                p.len(),
                source.num_classes()
            )))
        }
        Some(p) => p.clone(),
        None => source.label_marginal()?,
    };
    Ok(Inputs { source, target, samples, source_marginal })
}

/// The likelihood methods see calibrated outputs; the moment-matching
/// methods and MLLS-CM bring their own correction.
pub fn uses_calibration(method: Method) -> bool {
    matches!(method, Method::MllsEm | Method::MllsGrad)
}

/// Tail of the source sample reserved for fitting the calibration map.
pub fn validation_split(samples: &[LabeledSample], fraction: f64) -> &[LabeledSample] {
    let start = (samples.len() as f64 * (1.0 - fraction)).floor() as usize;
    &samples[start.min(samples.len())..]
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrationSummary {
    pub temperature: f64,
    pub biases: Vec<f64>,
    pub validation_size: usize,
    pub loss: f64,
    pub initial_loss: f64,
    pub converged: bool,
}

pub struct Calibration {
    pub fit: BctsFit,
    pub validation_size: usize,
}

impl Calibration {
    pub fn fit(config: &RunConfig, samples: &[LabeledSample]) -> CliResult<Self> {
        let validation = validation_split(samples, config.calibration.validation_fraction);
        let fit = bcts_fit(validation, config.calibration.loss).map_err(|e| CliError::from(e).context("calibration"))?;
        Ok(Self { fit, validation_size: validation.len() })
    }

    pub fn apply(&self, output: &ProbVector) -> CliResult<ProbVector> {
        Ok(bcts_apply(&self.fit.params, &clip_for_log(output))?)
    }

    pub fn summary(&self) -> CalibrationSummary {
        CalibrationSummary {
            temperature: self.fit.params.temperature,
            biases: self.fit.params.biases.clone(),
            validation_size: self.validation_size,
            loss: self.fit.loss,
            initial_loss: self.fit.initial_loss,
            converged: self.fit.converged,
        }
    }
}

/// Estimate plus the target outputs it was computed from.
pub struct Estimation {
    pub config: EstimatorConfig,
    pub result: EstimateResult,
    pub calibration: Option<Calibration>,
    pub target: Vec<ProbVector>,
}

/// Calibrates when configured and the method uses it, then estimates.
/// Non-convergence is an error carrying the partial result.
pub fn run_estimation(config: &RunConfig, inputs: &Inputs) -> CliResult<Estimation> {
    let method = config.method.method;
    let calibration = if config.calibration.enabled && uses_calibration(method) {
        Some(Calibration::fit(config, &inputs.samples)?)
    } else {
        None
    };
    let target: Vec<ProbVector> = match &calibration {
        Some(c) => inputs.target.outputs.iter().map(|o| c.apply(o)).collect::<CliResult<_>>()?,
        None => inputs.target.outputs.clone(),
    };
    let result = estimate(
        &config.method,
        EstimationData { source: &inputs.samples, target: &target, source_marginal: &inputs.source_marginal },
    )?;
    if !result.converged {
        return Err(CliError::new(
            Kind::Convergence,
            format!("{method} did not converge within {} iterations (tol {:e})", result.iterations, config.method.tol),
        )
        .with_details(json!({
            "weights": result.weights.as_slice(),
            "iterations": result.iterations,
            "final_objective": result.final_objective,
        })));
    }
    Ok(Estimation { config: config.method.clone(), result, calibration, target })
}

#[derive(Debug, Clone, Serialize)]
pub struct EstimateReport {
    pub method: Method,
    pub classes: Vec<String>,
    pub weights: Vec<f64>,
    pub target_marginal: ProbVector,
    pub source_marginal: ProbVector,
    pub iterations: usize,
    pub converged: bool,
    pub final_objective: f64,
    pub n_source: usize,
    pub n_target: usize,
    pub calibration: Option<CalibrationSummary>,
    pub diagnostics: Option<Value>,
}

pub fn estimate_cmd(config: &RunConfig) -> CliResult<EstimateReport> {
    let inputs = load_inputs(config)?;
    let est = run_estimation(config, &inputs)?;
    let diagnostics = config.diagnostics.enabled.then(|| {
        match PredictorTable::from_outputs(est.target.iter().cloned()).and_then(|t| diagnose(&t, &est.result.weights)) {
            Ok(r) => json!({
                "log_likelihood": r.log_likelihood,
                "sigma_min": r.sigma_min,
                "tau": r.tau,
                "identifiable": r.identifiable,
                "hessian_nsd": r.hessian_nsd,
                "projected_gradient_norm": r.projected_gradient_norm,
            }),
            Err(e) => json!({ "error": e.to_string() }),
        }
    });
    Ok(EstimateReport {
        method: est.config.method,
        classes: inputs.source.classes.clone(),
        weights: est.result.weights.as_slice().to_vec(),
        target_marginal: est.result.weights.target_marginal(),
        source_marginal: inputs.source_marginal.clone(),
        iterations: est.result.iterations,
        converged: est.result.converged,
        final_objective: est.result.final_objective,
        n_source: inputs.samples.len(),
        n_target: inputs.target.outputs.len(),
        calibration: est.calibration.as_ref().map(Calibration::summary),
        diagnostics,
    })
}

/// Calibration error of labeled outputs. Two-class outputs are first
/// pooled into equal-width bins so that groups are not singletons.
pub fn calibration_error(samples: &[LabeledSample], bins: usize) -> CliResult<f64> {
    let k = samples.first().map_or(0, |s| s.output.len());
    let grouped: Vec<LabeledSample> = if k == 2 {
        let binned = bin_aggregate(samples, bins, BinStatistic::OutputMean)?;
        samples
            .iter()
            .zip(binned.assignments())
            .map(|(s, &b)| {
                let rep = binned.bin_outputs()[b].clone().expect("an occupied bin has a representative");
                LabeledSample::new(rep, s.label).map_err(CliError::from)
            })
            .collect::<CliResult<_>>()?
    } else {
        samples.to_vec()
    };
    Ok(estimate_calibration_error(&grouped)?.calibration_error)
}

#[derive(Debug, Clone, Serialize)]
pub struct DiagnoseReport {
    pub classes: Vec<String>,
    pub weights: Vec<f64>,
    pub method: Option<Method>,
    #[serde(flatten)]
    pub report: DiagnosticsReport,
    pub calibration_error: f64,
    pub calibration: Option<CalibrationSummary>,
    pub sandwich: SandwichReport,
    pub tol: f64,
    /// Whether the projected gradient norm is at most `tol`.
    pub stationary: bool,
}

/// Diagnostics at given weights, or at the estimate of the configured
/// method when `weights` is `None`.
pub fn diagnose_cmd(config: &RunConfig, weights: Option<&[f64]>) -> CliResult<DiagnoseReport> {
    let inputs = load_inputs(config)?;
    let (w, method, calibration, target) = match weights {
        Some(w) => {
            let w = WeightVector::new(w.to_vec(), inputs.source_marginal.clone()).map_err(|e| CliError::from(e).context("--weights"))?;
            let calibration =
                if config.calibration.enabled { Some(Calibration::fit(config, &inputs.samples)?) } else { None };
            let target = match &calibration {
                Some(c) => inputs.target.outputs.iter().map(|o| c.apply(o)).collect::<CliResult<_>>()?,
                None => inputs.target.outputs.clone(),
            };
            (w, None, calibration, target)
        }
        None => {
            let est = run_estimation(config, &inputs)?;
            (est.result.weights, Some(est.config.method), est.calibration, est.target)
        }
    };
    let table = PredictorTable::from_outputs(target.iter().cloned())?;
    let mut report = diagnose(&table, &w)?;

    let source: Vec<LabeledSample> = match &calibration {
        Some(c) => inputs
            .samples
            .iter()
            .map(|s| Ok(LabeledSample::new(c.apply(&s.output)?, s.label)?))
            .collect::<CliResult<_>>()?,
        None => inputs.samples.clone(),
    };
    let ce = calibration_error(&source, config.diagnostics.bins)?;
    let w_norm = w.as_slice().iter().map(|x| x * x).sum::<f64>().sqrt();
    report.bound_terms = Some(compute_bound_terms(&BoundInputs {
        sigma_min_c: report.sigma_min,
        sigma_min_f: report.sigma_min,
        tau: report.tau,
        calib_error: ce,
        w_star_norm: w_norm,
        m: target.len(),
        n: calibration.as_ref().map_or(inputs.samples.len(), |c| c.validation_size),
        delta: config.diagnostics.delta,
    })?);
    let sandwich = eigenvalue_sandwich_check(&table, &w)?;
    let tol = config.method.tol;
    Ok(DiagnoseReport {
        classes: inputs.source.classes.clone(),
        weights: w.as_slice().to_vec(),
        method,
        stationary: report.projected_gradient_norm <= tol,
        report,
        calibration_error: ce,
        calibration: calibration.as_ref().map(Calibration::summary),
        sandwich,
        tol,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct CalibrateReport {
    #[serde(flatten)]
    pub calibration: CalibrationSummary,
    pub iterations: usize,
    pub gradient_norm: f64,
    /// Measured on the validation split.
    pub calibration_error_before: f64,
    pub calibration_error_after: f64,
}

/// Fits BCTS on the validation split of `source`; with `apply`, also
/// returns the calibrated version of that file.
pub fn calibrate_cmd(config: &RunConfig, apply: Option<&Path>) -> CliResult<(CalibrateReport, Option<PredictionFile>)> {
    let path = config.source.path.as_deref().ok_or_else(|| CliError::input("no source file: pass --source or set source.path"))?;
    let source = PredictionFile::read(path)?;
    let samples = source.labeled_samples()?;
    let calibration = Calibration::fit(config, &samples)?;
    let validation = validation_split(&samples, config.calibration.validation_fraction);
    let calibrated: Vec<LabeledSample> = validation
        .iter()
        .map(|s| Ok(LabeledSample::new(calibration.apply(&s.output)?, s.label)?))
        .collect::<CliResult<_>>()?;
    let bins = config.diagnostics.bins;
    let report = CalibrateReport {
        calibration: calibration.summary(),
        iterations: calibration.fit.iterations,
        gradient_norm: calibration.fit.gradient_norm,
        calibration_error_before: calibration_error(validation, bins)?,
        calibration_error_after: calibration_error(&calibrated, bins)?,
    };
    let applied = match apply {
        Some(p) => {
            let file = PredictionFile::read(p)?;
            check_same_classes(&source, &file)?;
            let outputs = file.outputs.iter().map(|o| calibration.apply(o)).collect::<CliResult<_>>()?;
            Some(PredictionFile { outputs, ..file })
        }
        None => None,
    };
    Ok((report, applied))
}

/// Worker count from [`THREADS_ENV`]; `None` lets rayon decide.
pub fn thread_cap() -> CliResult<Option<usize>> {
    match std::env::var(THREADS_ENV) {
        Err(std::env::VarError::NotPresent) => Ok(None),
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::input(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        },
        Err(e) => Err(CliError::input(format!("{THREADS_ENV}: {e}"))),
    }
}

/// Runs every trial, in parallel when allowed. Reports come back in
/// [`ExperimentConfig::trial_indices`] order whatever the thread count.
pub fn run_benchmark(experiment: &ExperimentConfig, threads: Option<usize>) -> CliResult<Vec<TrialReport>> {
    experiment.validate()?;
    let indices = experiment.trial_indices();
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = threads {
        builder = builder.num_threads(n);
    }
    let pool = builder.build().map_err(|e| CliError::input(format!("thread pool: {e}")))?;
    let nested: Vec<Vec<TrialReport>> = pool.install(|| indices.par_iter().map(|&i| run_trial(experiment, i)).collect());
    Ok(nested.into_iter().flatten().collect())
}

pub fn mse_csv(rows: &[MseRow]) -> CliResult<String> {
    let mut csv = csv::Writer::from_writer(Vec::new());
    let io_err = |e: csv::Error| CliError::input(format!("writing CSV: {e}"));
    csv.write_record(["shift_param", "method", "m", "n_trials", "mse", "stderr"]).map_err(io_err)?;
    for r in rows {
        csv.write_record([
            format!("{:?}", r.shift_param),
            r.method.name().to_string(),
            r.m.to_string(),
            r.n_trials.to_string(),
            format!("{:?}", r.mse),
            format!("{:?}", r.stderr),
        ])
        .map_err(io_err)?;
    }
    let bytes = csv.into_inner().map_err(|e| CliError::input(format!("writing CSV: {e}")))?;
    String::from_utf8(bytes).map_err(|e| CliError::input(e.to_string()))
}

#[derive(Debug, Clone, Serialize)]
pub struct MethodSummary {
    pub method: Method,
    /// Mean squared error over every successful trial of the method.
    pub mse: f64,
    pub successes: usize,
    pub failures: usize,
    pub non_converged: usize,
}

pub fn benchmark_summary(experiment: &ExperimentConfig, reports: &[TrialReport]) -> Value {
    let per_method: Vec<MethodSummary> = experiment
        .methods
        .iter()
        .map(|&method| {
            let mine: Vec<&TrialReport> = reports.iter().filter(|r| r.method == method).collect();
            let errors: Vec<f64> = mine.iter().filter_map(|r| r.squared_error).collect();
            MethodSummary {
                method,
                mse: if errors.is_empty() { f64::NAN } else { errors.iter().sum::<f64>() / errors.len() as f64 },
                successes: errors.len(),
                failures: mine.len() - errors.len(),
                non_converged: mine.iter().filter(|r| r.squared_error.is_some() && !r.converged).count(),
            }
        })
        .collect();
    let first_errors: Vec<&str> = reports.iter().filter_map(|r| r.error.as_deref()).take(5).collect();
    json!({
        "n_reports": reports.len(),
        "n_trials": experiment.n_trials,
        "base_seed": experiment.base_seed,
        "methods": per_method,
        "sample_errors": first_errors,
    })
}

pub fn benchmark_cmd(experiment: &ExperimentConfig) -> CliResult<(String, Value)> {
    let reports = run_benchmark(experiment, thread_cap()?)?;
    let rows = aggregate(&reports);
    Ok((mse_csv(&rows)?, benchmark_summary(experiment, &reports)))
}

/// The single shift of a simulation, from flags or the config.
pub fn simulation_shift(alpha: Option<f64>, target_marginal: Option<Vec<f64>>, fallback: &[ShiftSpec]) -> CliResult<ShiftSpec> {
    match (alpha, target_marginal) {
        (Some(alpha), None) => Ok(ShiftSpec::Dirichlet { alpha }),
        (None, Some(p)) => Ok(ShiftSpec::Explicit {
            target_marginal: ProbVector::new(p).map_err(|e| CliError::from(e).context("--target-marginal"))?,
        }),
        (None, None) => fallback.first().cloned().ok_or_else(|| CliError::input("no shift: pass --alpha or --target-marginal")),
        (Some(_), Some(_)) => Err(CliError::input("--alpha and --target-marginal are mutually exclusive")),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn samples(n: usize) -> Vec<LabeledSample> {
        (0..n).map(|i| LabeledSample::new(ProbVector::new(vec![0.5, 0.5]).unwrap(), i % 2).unwrap()).collect()
    }

    #[test]
    fn validation_split_takes_the_tail() {
        let s = samples(10);
        assert_eq!(validation_split(&s, 0.5).len(), 5);
        assert_eq!(validation_split(&samples(11), 0.5).len(), 11 - 11 / 2);
        assert_eq!(validation_split(&s, 0.25).len(), 3);
    }

    #[test]
    fn csv_has_fixed_columns() {
        let csv = mse_csv(&[MseRow { shift_param: 0.5, method: Method::MllsEm, m: 10, n_trials: 3, mse: 1e-7, stderr: 0.25 }]).unwrap();
        assert_eq!(csv, "shift_param,method,m,n_trials,mse,stderr\n0.5,mlls_em,10,3,1e-7,0.25\n");
    }

    #[test]
    fn shift_from_flags() {
        assert_eq!(simulation_shift(Some(2.0), None, &[]).unwrap(), ShiftSpec::Dirichlet { alpha: 2.0 });
        assert!(simulation_shift(Some(2.0), Some(vec![0.5, 0.5]), &[]).is_err());
        assert!(simulation_shift(None, Some(vec![0.5, 0.6]), &[]).is_err());
        assert!(simulation_shift(None, None, &[]).is_err());
    }

    #[test]
    fn perfectly_calibrated_bins_have_zero_error() {
        // Half the samples at [0.25, 0.75] with labels in exactly that ratio.
        let mut s = Vec::new();
        for i in 0..8 {
            s.push(LabeledSample::new(ProbVector::new(vec![0.25, 0.75]).unwrap(), usize::from(i % 4 != 0)).unwrap());
            s.push(LabeledSample::new(ProbVector::new(vec![0.75, 0.25]).unwrap(), usize::from(i % 4 == 0)).unwrap());
        }
        assert!(calibration_error(&s, 4).unwrap() < 1e-15);
    }

    #[test]
    fn parallel_benchmark_matches_sequential() {
        let experiment = ExperimentConfig { n_trials: 4, sizes: vec![50], ..ExperimentConfig::default() };
        let seq = labelshift_core::simulation::run_trials(&experiment).unwrap();
        assert_eq!(run_benchmark(&experiment, Some(3)).unwrap(), seq);
    }
}
