//! Synthetic two-Gaussian benchmark: Dirichlet label shift, paired trials
//! and MSE aggregation.
//!
//! Every stochastic step consumes only a seed derived from the experiment's
//! base seed and the trial's indices, so any trial reruns in isolation to
//! the same report, and trials may execute in any order.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::calibration::{bcts_apply, bcts_fit, clip_for_log, BctsParams, CalibrationLoss};
use crate::diagnostics::{diagnose, DiagnosticsReport};
use crate::estimators::{estimate, EstimationData, EstimatorConfig, Method};
use crate::predictors::{bin_aggregate, gmm_bayes_predict, BinStatistic, GmmSpec};
use crate::rng::{derive_seed, CounterRng};
use crate::{Error, LabeledSample, PredictorTable, ProbVector, Result, WeightVector};

/// Target label distribution of a trial.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case", deny_unknown_fields)]
pub enum ShiftSpec {
    /// Symmetric Dirichlet(α) draw; smaller α means more severe shift.
    Dirichlet { alpha: f64 },
    Explicit { target_marginal: ProbVector },
}

impl ShiftSpec {
    pub fn validate(&self, k: usize) -> Result<()> {
        match self {
            ShiftSpec::Dirichlet { alpha } if !(alpha.is_finite() && *alpha > 0.0) => {
                Err(Error::InvalidParameter(alloc::format!("alpha must be positive, got {alpha}")))
            }
            ShiftSpec::Explicit { target_marginal } if target_marginal.len() != k => {
                Err(Error::DimensionMismatch { expected: k, found: target_marginal.len() })
            }
            _ => Ok(()),
        }
    }

    /// Scalar used to label MSE rows: `α`, or the last class's target mass.
    pub fn param(&self) -> f64 {
        match self {
            ShiftSpec::Dirichlet { alpha } => *alpha,
            ShiftSpec::Explicit { target_marginal } => target_marginal[target_marginal.len() - 1],
        }
    }

    pub fn draw(&self, k: usize, seed: u64) -> Result<ProbVector> {
        self.validate(k)?;
        match self {
            ShiftSpec::Dirichlet { alpha } => sample_dirichlet_shift(*alpha, k, seed),
            ShiftSpec::Explicit { target_marginal } => Ok(target_marginal.clone()),
        }
    }
}

/// `n` draws of `(x, y)`: `y ~ marginal`, then `x ~ N(±μ, 1)`.
pub fn sample_gmm(spec: &GmmSpec, marginal: &ProbVector, n: usize, seed: u64) -> Result<Vec<(f64, usize)>> {
    if marginal.len() != 2 {
        return Err(Error::DimensionMismatch { expected: 2, found: marginal.len() });
    }
    let mut rng = CounterRng::new(seed);
    Ok((0..n)
        .map(|_| {
            let y = rng.categorical(marginal.as_slice());
            (spec.class_mean(y) + rng.normal(), y)
        })
        .collect())
}

/// Symmetric Dirichlet(α) via normalized Gamma variates, computed in log
/// space so that small `α` does not underflow every coordinate.
pub fn sample_dirichlet_shift(alpha: f64, k: usize, seed: u64) -> Result<ProbVector> {
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::InvalidParameter(alloc::format!("alpha must be positive, got {alpha}")));
    }
    if k == 0 {
        return Err(Error::EmptyInput("classes"));
    }
    let mut rng = CounterRng::new(seed);
    let logs: Vec<f64> = (0..k).map(|_| rng.log_gamma_variate(alpha)).collect();
    let max = logs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    ProbVector::normalized(logs.iter().map(|l| libm::exp(l - max)).collect())
}

/// Two-stage resampling: each draw picks `y ~ target_marginal`, then a
/// uniformly random pool element with that label, with replacement.
pub fn resample_by_marginal<T: Clone>(
    pool: &[T],
    label_of: impl Fn(&T) -> usize,
    target_marginal: &ProbVector,
    n: usize,
    seed: u64,
) -> Result<Vec<T>> {
    let k = target_marginal.len();
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); k];
    for (i, item) in pool.iter().enumerate() {
        let y = label_of(item);
        if y >= k {
            return Err(Error::LabelOutOfRange { label: y, classes: k });
        }
        by_class[y].push(i);
    }
    for (class, members) in by_class.iter().enumerate() {
        if target_marginal[class] > 0.0 && members.is_empty() {
            return Err(Error::EmptyPoolClass { class });
        }
    }
    let mut rng = CounterRng::new(seed);
    Ok((0..n)
        .map(|_| {
            let members = &by_class[rng.categorical(target_marginal.as_slice())];
            pool[members[rng.below(members.len())]].clone()
        })
        .collect())
}

/// How the benchmark turns `x` into a probability vector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PredictorSpec {
    /// The exact Bayes posterior under the source distribution.
    Oracle,
    /// The posterior averaged within equal-width bins fitted on the source
    /// sample (label mean per bin).
    Binned { bins: usize },
    /// The posterior with its logits divided by a fixed temperature, a
    /// deliberately miscalibrated predictor for `temperature != 1`.
    Tempered { temperature: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GmmDataset {
    pub mu: f64,
    /// Defaults to uniform.
    pub source_marginal: Option<ProbVector>,
    pub n_source: usize,
    pub predictor: PredictorSpec,
}

impl Default for GmmDataset {
    fn default() -> Self {
        Self { mu: 1.0, source_marginal: None, n_source: 10_000, predictor: PredictorSpec::Oracle }
    }
}

impl GmmDataset {
    pub fn spec(&self) -> Result<GmmSpec> {
        let p = match &self.source_marginal {
            Some(p) => p.clone(),
            None => ProbVector::uniform(2)?,
        };
        GmmSpec::new(self.mu, p)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationSpec {
    #[default]
    None,
    /// BCTS fitted on a held-out half of the source sample, applied to the
    /// outputs seen by the likelihood methods.
    Bcts,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: GmmDataset,
    pub shifts: Vec<ShiftSpec>,
    pub methods: Vec<Method>,
    /// Target sample sizes `m`.
    pub sizes: Vec<usize>,
    pub n_trials: usize,
    pub base_seed: u64,
    /// Solver settings; `method` is ignored in favor of `methods`.
    pub estimator: EstimatorConfig,
    /// Compute `w*` from realized target label frequencies instead of the
    /// drawn marginal.
    pub w_star_from_realized: bool,
    pub calibration: CalibrationSpec,
    pub with_diagnostics: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: GmmDataset::default(),
            shifts: vec![ShiftSpec::Dirichlet { alpha: 1.0 }],
            methods: vec![Method::BbseHard, Method::MllsEm],
            sizes: vec![1000],
            n_trials: 100,
            base_seed: 0,
            estimator: EstimatorConfig { clip_negative: true, ..EstimatorConfig::default() },
            w_star_from_realized: false,
            calibration: CalibrationSpec::None,
            with_diagnostics: false,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() {
            return Err(Error::InvalidParameter("method list is empty".into()));
        }
        if self.shifts.is_empty() {
            return Err(Error::InvalidParameter("shift list is empty".into()));
        }
        if self.sizes.is_empty() || self.sizes.contains(&0) {
            return Err(Error::InvalidParameter("sizes must be a non-empty list of positive integers".into()));
        }
        if self.n_trials == 0 {
            return Err(Error::InvalidParameter("n_trials must be at least 1".into()));
        }
        if self.dataset.n_source < 4 {
            return Err(Error::InvalidParameter("n_source must be at least 4".into()));
        }
        match self.dataset.predictor {
            PredictorSpec::Binned { bins: 0 } => return Err(Error::InvalidParameter("bins must be at least 1".into())),
            PredictorSpec::Tempered { temperature } if !(temperature.is_finite() && temperature > 0.0) => {
                return Err(Error::InvalidParameter(alloc::format!("temperature must be positive, got {temperature}")))
            }
            _ => {}
        }
        let spec = self.dataset.spec()?;
        for s in &self.shifts {
            s.validate(spec.source_marginal.len())?;
        }
        self.estimator.validate()
    }

    /// Every `(shift, size, trial)` index triple, in report order.
    pub fn trial_indices(&self) -> Vec<TrialIndex> {
        let mut out = Vec::with_capacity(self.shifts.len() * self.sizes.len() * self.n_trials);
        for shift in 0..self.shifts.len() {
            for size in 0..self.sizes.len() {
                for trial in 0..self.n_trials {
                    out.push(TrialIndex { shift, size, trial });
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct TrialIndex {
    pub shift: usize,
    pub size: usize,
    pub trial: usize,
}

impl TrialIndex {
    /// Seed of the trial's data. Methods are deliberately not part of the
    /// path: all methods of a trial see the same source and target sample.
    pub fn seed(&self, base_seed: u64) -> u64 {
        derive_seed(base_seed, &[self.shift as u64, self.size as u64, self.trial as u64])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrialReport {
    pub index: TrialIndex,
    pub shift_param: f64,
    pub method: Method,
    pub seed: u64,
    pub m: usize,
    pub target_marginal: ProbVector,
    pub w_star: WeightVector,
    pub w_hat: Option<WeightVector>,
    /// `‖ŵ − w*‖₂²`.
    pub squared_error: Option<f64>,
    pub iterations: usize,
    pub converged: bool,
    pub error: Option<String>,
    pub diagnostics: Option<DiagnosticsReport>,
}

/// Source and target samples of one trial, already passed through the
/// configured predictor.
#[derive(Debug, Clone)]
pub struct TrialData {
    pub target_marginal: ProbVector,
    pub w_star: WeightVector,
    pub source: Vec<LabeledSample>,
    /// Target outputs with their (hidden) labels.
    pub target: Vec<LabeledSample>,
    pub source_marginal: ProbVector,
}

fn apply_predictor(
    spec: &GmmSpec,
    predictor: PredictorSpec,
    source_xy: &[(f64, usize)],
    target_xy: &[(f64, usize)],
) -> Result<(Vec<LabeledSample>, Vec<LabeledSample>)> {
    let oracle = |xy: &[(f64, usize)]| -> Result<Vec<LabeledSample>> {
        xy.iter().map(|&(x, y)| LabeledSample::new(gmm_bayes_predict(spec, x), y)).collect()
    };
    let source = oracle(source_xy)?;
    let target = oracle(target_xy)?;
    match predictor {
        PredictorSpec::Oracle => Ok((source, target)),
        PredictorSpec::Binned { bins } => {
            let binned = bin_aggregate(&source, bins, BinStatistic::LabelMean)?;
            let map = |s: Vec<LabeledSample>| -> Result<Vec<LabeledSample>> {
                s.into_iter().map(|x| LabeledSample::new(binned.apply(&x.output).clone(), x.label)).collect()
            };
            Ok((map(source)?, map(target)?))
        }
        PredictorSpec::Tempered { temperature } => {
            let params = BctsParams::new(temperature, vec![0.0; 2])?;
            let map = |s: Vec<LabeledSample>| -> Result<Vec<LabeledSample>> {
                s.into_iter()
                    .map(|x| LabeledSample::new(bcts_apply(&params, &clip_for_log(&x.output))?, x.label))
                    .collect()
            };
            Ok((map(source)?, map(target)?))
        }
    }
}

/// Generates the samples of one trial.
pub fn generate_trial(config: &ExperimentConfig, index: TrialIndex) -> Result<TrialData> {
    let spec = config.dataset.spec()?;
    let seed = index.seed(config.base_seed);
    let shift = config.shifts.get(index.shift).ok_or(Error::InvalidParameter("shift index out of range".into()))?;
    let m = *config.sizes.get(index.size).ok_or(Error::InvalidParameter("size index out of range".into()))?;
    let target_marginal = shift.draw(2, derive_seed(seed, &[0]))?;
    let source_xy = sample_gmm(&spec, &spec.source_marginal, config.dataset.n_source, derive_seed(seed, &[1]))?;
    let target_xy = sample_gmm(&spec, &target_marginal, m, derive_seed(seed, &[2]))?;
    let (source, target) = apply_predictor(&spec, config.dataset.predictor, &source_xy, &target_xy)?;

    let reference = if config.w_star_from_realized {
        let mut counts = [0.0; 2];
        target_xy.iter().for_each(|&(_, y)| counts[y] += 1.0);
        ProbVector::normalized(counts.to_vec())?
    } else {
        target_marginal.clone()
    };
    let w_star = WeightVector::from_target_marginal(&reference, spec.source_marginal.clone())?;
    Ok(TrialData { target_marginal, w_star, source, target, source_marginal: spec.source_marginal })
}

/// Fits BCTS on the second half of the source sample.
pub fn fit_bcts_on_holdout(source: &[LabeledSample]) -> Result<BctsParams> {
    let validation = &source[source.len() / 2..];
    Ok(bcts_fit(validation, CalibrationLoss::Nll)?.params)
}

fn uses_calibration(method: Method) -> bool {
    matches!(method, Method::MllsEm | Method::MllsGrad)
}

/// Runs every configured method on one trial's data.
pub fn run_trial(config: &ExperimentConfig, index: TrialIndex) -> Vec<TrialReport> {
    let seed = index.seed(config.base_seed);
    let shift_param = config.shifts.get(index.shift).map_or(f64::NAN, ShiftSpec::param);
    let m = config.sizes.get(index.size).copied().unwrap_or(0);
    let data = match generate_trial(config, index) {
        Ok(d) => d,
        Err(e) => {
            // Without data there is no w*; report the failure against the
            // unshifted reference.
            let p = config.dataset.spec().map(|s| s.source_marginal).unwrap_or_else(|_| {
                ProbVector::uniform(2).expect("two classes")
            });
            return config
                .methods
                .iter()
                .map(|&method| TrialReport {
                    index,
                    shift_param,
                    method,
                    seed,
                    m,
                    target_marginal: p.clone(),
                    w_star: WeightVector::ones(p.clone()),
                    w_hat: None,
                    squared_error: None,
                    iterations: 0,
                    converged: false,
                    error: Some(e.to_string()),
                    diagnostics: None,
                })
                .collect();
        }
    };

    let raw_target: Vec<ProbVector> = data.target.iter().map(|s| s.output.clone()).collect();
    let calibrated: Option<Result<Vec<ProbVector>>> = match config.calibration {
        CalibrationSpec::None => None,
        CalibrationSpec::Bcts if config.methods.iter().any(|&m| uses_calibration(m)) => {
            Some(fit_bcts_on_holdout(&data.source).and_then(|params| {
                raw_target.iter().map(|o| bcts_apply(&params, &clip_for_log(o))).collect()
            }))
        }
        CalibrationSpec::Bcts => None,
    };

    let mut diagnostics_cache: Option<Option<DiagnosticsReport>> = None;
    config
        .methods
        .iter()
        .map(|&method| {
            let target: Result<&[ProbVector]> = match (&calibrated, uses_calibration(method)) {
                (Some(Ok(c)), true) => Ok(c),
                (Some(Err(e)), true) => Err(e.clone()),
                _ => Ok(&raw_target),
            };
            let outcome = target.and_then(|target| {
                let est = estimate(
                    &EstimatorConfig { method, ..config.estimator.clone() },
                    EstimationData { source: &data.source, target, source_marginal: &data.source_marginal },
                )?;
                Ok((est, target))
            });
            let mut report = TrialReport {
                index,
                shift_param,
                method,
                seed,
                m,
                target_marginal: data.target_marginal.clone(),
                w_star: data.w_star.clone(),
                w_hat: None,
                squared_error: None,
                iterations: 0,
                converged: false,
                error: None,
                diagnostics: None,
            };
            match outcome {
                Ok((est, target)) => {
                    report.squared_error = Some(est.weights.squared_distance(data.w_star.as_slice()));
                    report.iterations = est.iterations;
                    report.converged = est.converged;
                    report.w_hat = Some(est.weights);
                    if config.with_diagnostics && uses_calibration(method) {
                        report.diagnostics = diagnostics_cache
                            .get_or_insert_with(|| {
                                PredictorTable::from_outputs(target.iter().cloned())
                                    .and_then(|t| diagnose(&t, &data.w_star))
                                    .ok()
                            })
                            .clone();
                    }
                }
                Err(e) => report.error = Some(e.to_string()),
            }
            report
        })
        .collect()
}

/// Runs the full sweep sequentially, in [`ExperimentConfig::trial_indices`]
/// order.
pub fn run_trials(config: &ExperimentConfig) -> Result<Vec<TrialReport>> {
    config.validate()?;
    Ok(config.trial_indices().into_iter().flat_map(|i| run_trial(config, i)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MseRow {
    pub shift_param: f64,
    pub method: Method,
    pub m: usize,
    /// Successful trials entering the mean.
    pub n_trials: usize,
    pub mse: f64,
    /// Standard error of the mean squared error.
    pub stderr: f64,
}

/// Mean and standard error of the squared errors per
/// `(shift, method, m)`, ordered by shift index, method, then size index.
/// Failed trials are excluded; independent of report order.
pub fn aggregate(reports: &[TrialReport]) -> Vec<MseRow> {
    let mut groups: BTreeMap<(usize, Method, usize), (f64, usize, Vec<(usize, f64)>)> = BTreeMap::new();
    for r in reports {
        let entry = groups.entry((r.index.shift, r.method, r.index.size)).or_insert((r.shift_param, r.m, Vec::new()));
        if let Some(e) = r.squared_error {
            entry.2.push((r.index.trial, e));
        }
    }
    groups
        .into_iter()
        .map(|((_, method, _), (shift_param, m, mut errors))| {
            // Fixed summation order regardless of how reports arrived.
            errors.sort_by_key(|&(t, _)| t);
            let n = errors.len();
            let (mse, stderr) = mean_and_stderr(errors.iter().map(|&(_, e)| e));
            MseRow { shift_param, method, m, n_trials: n, mse, stderr }
        })
        .collect()
}

/// Sample mean and standard error (`NaN` mean for no values, zero error
/// for one).
pub fn mean_and_stderr(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, libm::sqrt(var / n as f64))
}
