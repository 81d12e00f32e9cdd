//! Post-hoc calibration and canonical calibration error.
//!
//! * Bias-corrected temperature scaling (BCTS):
//!   `g_j(x) = exp(log(x_j)/T + b_j) / Σ_i exp(log(x_i)/T + b_i)`, with
//!   `k + 1` parameters fitted on labeled validation data.
//! * Confusion-row calibration: replace `f(x)` by `p_s(y | ŷ_x)`, the
//!   normalized row of the hard confusion matrix. This predictor is
//!   calibrated by construction.
//! * Calibration error `E(f) = sqrt(E_s ‖f(x) - f_c(x)‖²)` with
//!   `f_c(x) = P_s(y = · | f(x))`, estimated by grouping identical outputs.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::confusion::ConfusionMatrix;
use crate::simplex::{sample_classes, LabeledSample, MassKind, PredictorTable, ProbVector};
use crate::{Error, Result};

/// Floor applied to output entries before taking logarithms.
pub const LOG_CLIP: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BctsParams {
    pub temperature: f64,
    pub biases: Vec<f64>,
}

impl BctsParams {
    pub fn new(temperature: f64, biases: Vec<f64>) -> Result<Self> {
        if !(temperature.is_finite() && temperature > 0.0) {
            return Err(Error::InvalidParameter(alloc::format!("temperature must be positive, got {temperature}")));
        }
        if let Some(index) = biases.iter().position(|b| !b.is_finite()) {
            return Err(Error::InvalidEntry { index, value: biases[index] });
        }
        Ok(Self { temperature, biases })
    }

    /// `T = 1`, `b = 0`.
    pub fn identity(k: usize) -> Self {
        Self { temperature: 1.0, biases: vec![0.0; k] }
    }
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = libm::exp(*v - max);
        sum += *v;
    }
    z.iter_mut().for_each(|v| *v /= sum);
}

/// Applies BCTS. Every entry of `output` must be strictly positive; see
/// [`clip_for_log`].
pub fn bcts_apply(params: &BctsParams, output: &ProbVector) -> Result<ProbVector> {
    if params.biases.len() != output.len() {
        return Err(Error::DimensionMismatch { expected: params.biases.len(), found: output.len() });
    }
    if let Some(class) = output.as_slice().iter().position(|&v| v <= 0.0) {
        return Err(Error::ZeroProbability { class });
    }
    let inv_t = 1.0 / params.temperature;
    let mut z: Vec<f64> = output
        .as_slice()
        .iter()
        .zip(&params.biases)
        .map(|(&x, &b)| libm::log(x) * inv_t + b)
        .collect();
    softmax_in_place(&mut z);
    ProbVector::normalized(z)
}

/// Raises entries below [`LOG_CLIP`] to it and renormalizes. Outputs that
/// are already strictly above the floor are returned unchanged.
pub fn clip_for_log(output: &ProbVector) -> ProbVector {
    if output.as_slice().iter().all(|&v| v >= LOG_CLIP) {
        return output.clone();
    }
    let clipped = output.as_slice().iter().map(|&v| v.max(LOG_CLIP)).collect();
    ProbVector::normalized(clipped).expect("clipped entries are positive")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CalibrationLoss {
    /// Mean negative log-likelihood of the label.
    #[default]
    Nll,
    /// Mean squared distance to the one-hot label (Brier score).
    Mse,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BctsFit {
    pub params: BctsParams,
    pub loss: f64,
    /// Loss at `T = 1`, `b = 0`.
    pub initial_loss: f64,
    pub iterations: usize,
    pub converged: bool,
    pub gradient_norm: f64,
    /// Loss after each accepted step, starting with `initial_loss`.
    #[serde(skip)]
    pub loss_history: Vec<f64>,
}

const BCTS_GRAD_TOL: f64 = 1e-8;
const BCTS_MAX_ITERS: usize = 10_000;
const ARMIJO_C: f64 = 1e-4;
const BACKTRACK_SHRINK: f64 = 0.5;

/// Validation set in log space, `theta = (1/T, b_0, .., b_{k-1})`.
struct BctsObjective {
    logs: Vec<f64>,
    labels: Vec<usize>,
    k: usize,
    loss: CalibrationLoss,
}

impl BctsObjective {
    /// Mean loss and its gradient with respect to theta. The loss is
    /// infinite when `1/T <= 0`.
    fn eval(&self, theta: &[f64], grad: Option<&mut [f64]>) -> f64 {
        let (k, a) = (self.k, theta[0]);
        if !(a > 0.0) {
            return f64::INFINITY;
        }
        let n = self.labels.len() as f64;
        let mut total = 0.0;
        let mut z = vec![0.0; k];
        let mut dz = vec![0.0; k];
        let mut g_acc = vec![0.0; k + 1];
        for (row, &y) in self.logs.chunks_exact(k).zip(&self.labels) {
            for j in 0..k {
                z[j] = a * row[j] + theta[1 + j];
            }
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + libm::log(z.iter().map(|v| libm::exp(v - max)).sum::<f64>());
            let probs: Vec<f64> = z.iter().map(|v| libm::exp(v - lse)).collect();
            match self.loss {
                CalibrationLoss::Nll => {
                    total += lse - z[y];
                    for j in 0..k {
                        dz[j] = probs[j] - if j == y { 1.0 } else { 0.0 };
                    }
                }
                CalibrationLoss::Mse => {
                    let resid: Vec<f64> = (0..k).map(|j| probs[j] - if j == y { 1.0 } else { 0.0 }).collect();
                    total += resid.iter().map(|r| r * r).sum::<f64>();
                    let inner: f64 = resid.iter().zip(&probs).map(|(r, p)| r * p).sum();
                    for j in 0..k {
                        dz[j] = 2.0 * probs[j] * (resid[j] - inner);
                    }
                }
            }
            for j in 0..k {
                g_acc[0] += dz[j] * row[j];
                g_acc[1 + j] += dz[j];
            }
        }
        if let Some(grad) = grad {
            for (g, acc) in grad.iter_mut().zip(&g_acc) {
                *g = acc / n;
            }
        }
        total / n
    }
}

/// Fits BCTS by full-batch gradient descent on `(1/T, b)` from the
/// identity, with Armijo backtracking. Stops when the gradient norm drops
/// below `1e-8` or after 10 000 iterations; `converged` reports which.
pub fn bcts_fit(validation: &[LabeledSample], loss: CalibrationLoss) -> Result<BctsFit> {
    let k = sample_classes(validation)?;
    if validation.len() < k + 1 {
        return Err(Error::InvalidParameter(alloc::format!(
            "BCTS needs at least {} validation samples, got {}",
            k + 1,
            validation.len()
        )));
    }
    let first = validation[0].label;
    if validation.iter().all(|s| s.label == first) {
        return Err(Error::SingleClass);
    }

    let mut logs = Vec::with_capacity(validation.len() * k);
    for s in validation {
        logs.extend(clip_for_log(&s.output).as_slice().iter().map(|&v| libm::log(v)));
    }
    let objective = BctsObjective { logs, labels: validation.iter().map(|s| s.label).collect(), k, loss };

    let mut theta = vec![0.0; k + 1];
    theta[0] = 1.0;
    let mut grad = vec![0.0; k + 1];
    let mut value = objective.eval(&theta, Some(&mut grad));
    let initial_loss = value;
    let mut history = vec![value];
    let mut step = 1.0;
    let mut iterations = 0;
    let mut grad_norm = norm2(&grad);
    let mut trial = vec![0.0; k + 1];

    while grad_norm >= BCTS_GRAD_TOL && iterations < BCTS_MAX_ITERS {
        let sq = grad_norm * grad_norm;
        let mut accepted = false;
        while step > 1e-300 {
            for ((t, th), g) in trial.iter_mut().zip(&theta).zip(&grad) {
                *t = th - step * g;
            }
            let candidate = objective.eval(&trial, None);
            if candidate <= value - ARMIJO_C * step * sq {
                accepted = true;
                break;
            }
            step *= BACKTRACK_SHRINK;
        }
        if !accepted {
            break;
        }
        theta.copy_from_slice(&trial);
        value = objective.eval(&theta, Some(&mut grad));
        grad_norm = norm2(&grad);
        history.push(value);
        iterations += 1;
        step *= 2.0;
    }

    let params = BctsParams::new(1.0 / theta[0], theta[1..].to_vec())?;
    Ok(BctsFit {
        params,
        loss: value,
        initial_loss,
        iterations,
        converged: grad_norm < BCTS_GRAD_TOL,
        gradient_norm: grad_norm,
        loss_history: history,
    })
}

/// Mean BCTS loss of `params` on `samples` (outputs clipped as in fitting).
pub fn bcts_loss(params: &BctsParams, samples: &[LabeledSample], loss: CalibrationLoss) -> Result<f64> {
    let k = sample_classes(samples)?;
    if params.biases.len() != k {
        return Err(Error::DimensionMismatch { expected: k, found: params.biases.len() });
    }
    let mut logs = Vec::with_capacity(samples.len() * k);
    for s in samples {
        logs.extend(clip_for_log(&s.output).as_slice().iter().map(|&v| libm::log(v)));
    }
    let objective = BctsObjective { logs, labels: samples.iter().map(|s| s.label).collect(), k, loss };
    let mut theta = vec![1.0 / params.temperature];
    theta.extend_from_slice(&params.biases);
    Ok(objective.eval(&theta, None))
}

fn norm2(v: &[f64]) -> f64 {
    libm::sqrt(v.iter().map(|x| x * x).sum())
}

/// The calibrated predictor `ŷ ↦ p_s(y | ŷ)` read off a confusion matrix.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionCalibrator {
    rows: Vec<ProbVector>,
    masses: Vec<f64>,
}

impl ConfusionCalibrator {
    /// Row `i` normalized: `p_s(y | ŷ = i)`.
    pub fn rows(&self) -> &[ProbVector] {
        &self.rows
    }

    /// `p_s(ŷ = i)`.
    pub fn masses(&self) -> &[f64] {
        &self.masses
    }

    /// Calibrated output for a raw output: the row of its argmax.
    pub fn calibrate(&self, output: &ProbVector) -> &ProbVector {
        &self.rows[output.argmax()]
    }

    /// The calibrated predictor as a table over hard predictions. Rows that
    /// happen to coincide are merged.
    pub fn table(&self) -> PredictorTable {
        let entries = self.rows.iter().cloned().zip(self.masses.iter().copied()).collect();
        PredictorTable::new(entries, MassKind::Count).expect("rows carry positive mass")
    }
}

pub fn confusion_row_calibrate(confusion: &ConfusionMatrix) -> Result<ConfusionCalibrator> {
    let mut rows = Vec::with_capacity(confusion.num_classes());
    let mut masses = Vec::with_capacity(confusion.num_classes());
    for (prediction, row) in confusion.joint().iter().enumerate() {
        let mass: f64 = row.iter().sum();
        if mass <= 0.0 {
            return Err(Error::ZeroMassRow { prediction });
        }
        rows.push(ProbVector::normalized(row.clone())?);
        masses.push(mass);
    }
    Ok(ConfusionCalibrator { rows, masses })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationGroup {
    pub output: ProbVector,
    /// Empirical `P_s(y | f(x) = output)`.
    pub label_mean: ProbVector,
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CalibrationReport {
    pub calibration_error: f64,
    pub groups: Vec<CalibrationGroup>,
}

/// Groups samples by exact output and compares each output with the
/// empirical label distribution of its group.
///
/// Groups are ordered by the bit pattern of their output, so the result is
/// bitwise independent of sample order. Continuous predictors must be
/// discretized first (see [`crate::predictors::bin_aggregate`]); otherwise
/// every group is a singleton and this degenerates to the Brier score.
pub fn estimate_calibration_error(samples: &[LabeledSample]) -> Result<CalibrationReport> {
    let k = sample_classes(samples)?;
    let mut groups: BTreeMap<Vec<u64>, (&ProbVector, Vec<usize>)> = BTreeMap::new();
    for s in samples {
        groups.entry(s.output.bit_key()).or_insert_with(|| (&s.output, vec![0; k])).1[s.label] += 1;
    }
    let n = samples.len() as f64;
    let mut sq = 0.0;
    let mut out = Vec::with_capacity(groups.len());
    for (output, counts) in groups.into_values() {
        let size: usize = counts.iter().sum();
        let label_mean = ProbVector::normalized(counts.iter().map(|&c| c as f64).collect())?;
        let mass = size as f64 / n;
        let d: f64 = output
            .as_slice()
            .iter()
            .zip(label_mean.as_slice())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        sq += mass * d;
        out.push(CalibrationGroup { output: output.clone(), label_mean, mass });
    }
    Ok(CalibrationReport { calibration_error: libm::sqrt(sq), groups: out })
}
