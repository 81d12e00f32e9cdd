//! Concrete predictors: the two-Gaussian Bayes posterior, probabilistic
//! threshold classifiers, tabular predictors and equal-width binning.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::simplex::{sample_classes, LabeledSample, MassKind, PredictorTable, ProbVector};
use crate::special::logistic;
use crate::{Error, Result};

/// `p(x | y=0) = N(mu, 1)`, `p(x | y=1) = N(-mu, 1)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GmmSpec {
    pub mu: f64,
    pub source_marginal: ProbVector,
}

impl GmmSpec {
    pub fn new(mu: f64, source_marginal: ProbVector) -> Result<Self> {
        if !mu.is_finite() {
            return Err(Error::InvalidParameter(alloc::format!("mu must be finite, got {mu}")));
        }
        if source_marginal.len() != 2 {
            return Err(Error::DimensionMismatch { expected: 2, found: source_marginal.len() });
        }
        Ok(Self { mu, source_marginal })
    }

    /// Mean of the class-conditional density.
    pub fn class_mean(&self, label: usize) -> f64 {
        if label == 0 {
            self.mu
        } else {
            -self.mu
        }
    }
}

/// Bayes posterior `p_s(y | x)` of the two-Gaussian mixture.
///
/// The log-odds of class 0 are `log(p_0 / p_1) + 2 mu x`; the two unit
/// variance densities share their normalizer and quadratic term.
pub fn gmm_bayes_predict(spec: &GmmSpec, x: f64) -> ProbVector {
    let p = spec.source_marginal.as_slice();
    let log_prior_odds = libm::log(p[0]) - libm::log(p[1]);
    let z = log_prior_odds + 2.0 * spec.mu * x;
    ProbVector::new(vec![logistic(z), logistic(-z)]).expect("logistic pair sums to one")
}

/// Probabilistic threshold classifier on the real line.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPredictorSpec {
    c: f64,
}

impl ThresholdPredictorSpec {
    pub fn new(c: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::InvalidParameter(alloc::format!("c must lie in [0, 1], got {c}")));
        }
        Ok(Self { c })
    }

    pub fn c(&self) -> f64 {
        self.c
    }
}

/// `[c, 1 - c]` for `x >= 0`, otherwise `[1 - c, c]`: class 0 gets
/// probability `c` on the positive half-line. With `c = Φ(mu)` and equal
/// priors this is the posterior given `sign(x)` in the two-Gaussian model.
pub fn threshold_predict(spec: &ThresholdPredictorSpec, x: f64) -> ProbVector {
    let c = spec.c;
    let entries = if x >= 0.0 { vec![c, 1.0 - c] } else { vec![1.0 - c, c] };
    ProbVector::new(entries).expect("c in [0, 1]")
}

/// A verbatim table of `(output, probability mass)` rows; duplicate outputs
/// are merged.
pub fn tabular_predictor(outputs: Vec<(ProbVector, f64)>) -> Result<PredictorTable> {
    PredictorTable::new(outputs, MassKind::Probability)
}

/// What a bin's representative output is computed from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BinStatistic {
    /// Empirical mean of the one-hot labels in the bin. The binned predictor
    /// is then calibrated on the sample that built it.
    #[default]
    LabelMean,
    /// Mean of the raw outputs in the bin. Used to discretize a continuous
    /// predictor before estimating its calibration error.
    OutputMean,
}

/// Result of [`bin_aggregate`].
#[derive(Debug, Clone, PartialEq)]
pub struct BinnedPredictor {
    outputs: Vec<Option<ProbVector>>,
    masses: Vec<f64>,
    assignments: Vec<usize>,
    table: PredictorTable,
}

impl BinnedPredictor {
    pub fn n_bins(&self) -> usize {
        self.outputs.len()
    }

    /// Equal-width bin of the first coordinate `f_0(x)` in `[0, 1]`.
    pub fn bin_index(&self, output: &ProbVector) -> usize {
        bin_of(output[0], self.n_bins())
    }

    /// Bin of every input sample, in input order.
    pub fn assignments(&self) -> &[usize] {
        &self.assignments
    }

    /// Representative output of each bin; `None` for bins without source mass.
    pub fn bin_outputs(&self) -> &[Option<ProbVector>] {
        &self.outputs
    }

    /// Source mass of each bin.
    pub fn bin_masses(&self) -> &[f64] {
        &self.masses
    }

    pub fn empty_bins(&self) -> Vec<usize> {
        (0..self.n_bins()).filter(|&b| self.outputs[b].is_none()).collect()
    }

    /// Aggregated predictor over the non-empty bins.
    pub fn table(&self) -> &PredictorTable {
        &self.table
    }

    /// Maps an output to its bin's representative. Outputs falling in a bin
    /// that had no source mass use the nearest non-empty bin (lower index on
    /// ties).
    pub fn apply(&self, output: &ProbVector) -> &ProbVector {
        let b = self.bin_index(output) as isize;
        (0..self.n_bins() as isize)
            .flat_map(|d| [b - d, b + d])
            .filter(|&i| i >= 0 && (i as usize) < self.n_bins())
            .find_map(|i| self.outputs[i as usize].as_ref())
            .expect("at least one bin is non-empty")
    }
}

fn bin_of(value: f64, n_bins: usize) -> usize {
    let b = libm::floor(value * n_bins as f64);
    if b < 0.0 {
        0
    } else {
        (b as usize).min(n_bins - 1)
    }
}

/// Partitions `[0, 1]` into `n_bins` equal-width bins on the first output
/// coordinate and replaces each output by its bin's representative.
///
/// Two-class predictors only.
pub fn bin_aggregate(samples: &[LabeledSample], n_bins: usize, statistic: BinStatistic) -> Result<BinnedPredictor> {
    let k = sample_classes(samples)?;
    if k != 2 {
        return Err(Error::InvalidParameter(alloc::format!(
            "equal-width binning supports two classes, got {k}"
        )));
    }
    if n_bins == 0 {
        return Err(Error::InvalidParameter("n_bins must be at least 1".into()));
    }

    let mut counts = vec![0usize; n_bins];
    let mut label_counts = vec![[0usize; 2]; n_bins];
    let mut output_sums = vec![[0.0f64; 2]; n_bins];
    let mut first: Vec<Option<&ProbVector>> = vec![None; n_bins];
    let mut homogeneous = vec![true; n_bins];
    let mut assignments = Vec::with_capacity(samples.len());

    for s in samples {
        let b = bin_of(s.output[0], n_bins);
        assignments.push(b);
        counts[b] += 1;
        label_counts[b][s.label] += 1;
        output_sums[b][0] += s.output[0];
        output_sums[b][1] += s.output[1];
        match first[b] {
            None => first[b] = Some(&s.output),
            Some(f) => homogeneous[b] &= f.as_slice() == s.output.as_slice(),
        }
    }

    let n = samples.len() as f64;
    let mut outputs = Vec::with_capacity(n_bins);
    let mut masses = Vec::with_capacity(n_bins);
    let mut rows = Vec::new();
    for b in 0..n_bins {
        let mass = counts[b] as f64 / n;
        masses.push(mass);
        if counts[b] == 0 {
            outputs.push(None);
            continue;
        }
        let rep = match statistic {
            BinStatistic::LabelMean => {
                ProbVector::normalized(label_counts[b].iter().map(|&c| c as f64).collect())?
            }
            BinStatistic::OutputMean if homogeneous[b] => first[b].expect("non-empty bin").clone(),
            BinStatistic::OutputMean => ProbVector::normalized(output_sums[b].to_vec())?,
        };
        rows.push((rep.clone(), mass));
        outputs.push(Some(rep));
    }
    // Masses are count ratios; renormalize the table to absorb rounding.
    let total: f64 = rows.iter().map(|(_, m)| m).sum();
    rows.iter_mut().for_each(|(_, m)| *m /= total);
    let table = PredictorTable::new(rows, MassKind::Probability)?;
    Ok(BinnedPredictor { outputs, masses, assignments, table })
}
