//! Probability vectors, importance weights and finite-support predictor
//! tables.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Tolerance on `Σ p = 1` and on the weight constraint `Σ w_y p_s(y) = 1`.
pub const SIMPLEX_TOL: f64 = 1e-9;

fn check_entries(entries: &[f64]) -> Result<()> {
    if entries.is_empty() {
        return Err(Error::EmptyInput("probability vector"));
    }
    for (index, &value) in entries.iter().enumerate() {
        if !(value.is_finite() && value >= 0.0) {
            return Err(Error::InvalidEntry { index, value });
        }
    }
    Ok(())
}

/// A point on the probability simplex `Δ^{k-1}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    /// Validates without modifying: entries non-negative, sum within
    /// [`SIMPLEX_TOL`] of one.
    pub fn new(entries: Vec<f64>) -> Result<Self> {
        check_entries(&entries)?;
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::NotNormalized { sum });
        }
        Ok(Self(entries))
    }

    /// Divides non-negative weights (e.g. counts) by their sum.
    pub fn normalized(weights: Vec<f64>) -> Result<Self> {
        check_entries(&weights)?;
        let sum: f64 = weights.iter().sum();
        if sum <= 0.0 {
            return Err(Error::NotNormalized { sum });
        }
        Ok(Self(weights.into_iter().map(|w| w / sum).collect()))
    }

    /// Accepts entries whose sum is within `tol` of one, renormalizing only
    /// when the sum is off by more than [`SIMPLEX_TOL`]. Used on ingest of
    /// externally produced (often single-precision) outputs.
    pub fn renormalized_within(entries: Vec<f64>, tol: f64) -> Result<Self> {
        check_entries(&entries)?;
        let sum: f64 = entries.iter().sum();
        if (sum - 1.0).abs() <= SIMPLEX_TOL {
            Ok(Self(entries))
        } else if (sum - 1.0).abs() <= tol {
            Self::normalized(entries)
        } else {
            Err(Error::NotNormalized { sum })
        }
    }

    pub fn uniform(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::EmptyInput("probability vector"));
        }
        Ok(Self(vec![1.0 / k as f64; k]))
    }

    pub fn one_hot(k: usize, class: usize) -> Result<Self> {
        if class >= k {
            return Err(Error::LabelOutOfRange { label: class, classes: k });
        }
        let mut v = vec![0.0; k];
        v[class] = 1.0;
        Ok(Self(v))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.0
    }

    /// Index of the largest entry; ties go to the lowest index.
    pub fn argmax(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.0.iter().enumerate().skip(1) {
            if v > self.0[best] {
                best = i;
            }
        }
        best
    }

    pub fn dot(&self, other: &[f64]) -> f64 {
        self.0.iter().zip(other).map(|(a, b)| a * b).sum()
    }

    pub fn min(&self) -> f64 {
        self.0.iter().copied().fold(f64::INFINITY, f64::min)
    }

    /// Bit patterns of the entries; the grouping key for exact equality.
    pub(crate) fn bit_key(&self) -> Vec<u64> {
        self.0.iter().map(|v| v.to_bits()).collect()
    }
}

impl core::ops::Index<usize> for ProbVector {
    type Output = f64;
    fn index(&self, i: usize) -> &f64 {
        &self.0[i]
    }
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        Self::new(v)
    }
}

impl From<ProbVector> for Vec<f64> {
    fn from(p: ProbVector) -> Self {
        p.0
    }
}

/// Importance weights `w_y = p_t(y) / p_s(y)` on the feasible set
/// `W = { w >= 0 : Σ_y w_y p_s(y) = 1 }`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawWeights")]
pub struct WeightVector {
    weights: Vec<f64>,
    source_marginal: ProbVector,
}

#[derive(Deserialize)]
struct RawWeights {
    weights: Vec<f64>,
    source_marginal: ProbVector,
}

impl TryFrom<RawWeights> for WeightVector {
    type Error = Error;
    fn try_from(raw: RawWeights) -> Result<Self> {
        Self::new(raw.weights, raw.source_marginal)
    }
}

impl WeightVector {
    pub fn new(weights: Vec<f64>, source_marginal: ProbVector) -> Result<Self> {
        if weights.len() != source_marginal.len() {
            return Err(Error::DimensionMismatch { expected: source_marginal.len(), found: weights.len() });
        }
        check_entries(&weights)?;
        let value = source_marginal.dot(&weights);
        if (value - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::WeightConstraint { value });
        }
        Ok(Self { weights, source_marginal })
    }

    /// The no-shift point `w = 1`.
    pub fn ones(source_marginal: ProbVector) -> Self {
        let weights = vec![1.0; source_marginal.len()];
        Self { weights, source_marginal }
    }

    /// `w_y = p_t(y) / p_s(y)`; requires a strictly positive source marginal.
    pub fn from_target_marginal(target: &ProbVector, source_marginal: ProbVector) -> Result<Self> {
        if target.len() != source_marginal.len() {
            return Err(Error::DimensionMismatch { expected: source_marginal.len(), found: target.len() });
        }
        require_positive(&source_marginal)?;
        let weights = target
            .as_slice()
            .iter()
            .zip(source_marginal.as_slice())
            .map(|(t, s)| t / s)
            .collect();
        Self::new(weights, source_marginal)
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.weights
    }

    pub fn source_marginal(&self) -> &ProbVector {
        &self.source_marginal
    }

    pub fn target_marginal(&self) -> ProbVector {
        weights_to_target_marginal(self)
    }

    /// `|Σ_y w_y p_s(y) - 1|`.
    pub fn constraint_residual(&self) -> f64 {
        (self.source_marginal.dot(&self.weights) - 1.0).abs()
    }

    pub fn squared_distance(&self, other: &[f64]) -> f64 {
        self.weights.iter().zip(other).map(|(a, b)| (a - b) * (a - b)).sum()
    }
}

pub(crate) fn require_positive(p: &ProbVector) -> Result<()> {
    match p.as_slice().iter().position(|&v| v <= 0.0) {
        Some(class) => Err(Error::DegenerateMarginal { class }),
        None => Ok(()),
    }
}

/// Euclidean projection of `v` onto `W`.
///
/// The KKT conditions give `w_y = max(0, v_y - λ p_y)` for the unique `λ`
/// with `Σ_y p_y w_y = 1`. The active set is found by scanning the
/// breakpoints `v_y / p_y` in decreasing order.
pub fn project_to_weight_simplex(v: &[f64], source_marginal: &ProbVector) -> Result<WeightVector> {
    let k = source_marginal.len();
    if v.len() != k {
        return Err(Error::DimensionMismatch { expected: k, found: v.len() });
    }
    if let Some(index) = v.iter().position(|x| !x.is_finite()) {
        return Err(Error::InvalidEntry { index, value: v[index] });
    }
    require_positive(source_marginal)?;
    let p = source_marginal.as_slice();

    if v.iter().all(|&x| x >= 0.0) && (source_marginal.dot(v) - 1.0).abs() <= 1e-14 {
        return Ok(WeightVector { weights: v.to_vec(), source_marginal: source_marginal.clone() });
    }

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| (v[b] / p[b]).total_cmp(&(v[a] / p[a])));

    let (mut sum_pv, mut sum_pp) = (0.0, 0.0);
    let mut lambda = 0.0;
    for (t, &y) in order.iter().enumerate() {
        sum_pv += p[y] * v[y];
        sum_pp += p[y] * p[y];
        lambda = (sum_pv - 1.0) / sum_pp;
        let next = order.get(t + 1).map_or(f64::NEG_INFINITY, |&z| v[z] / p[z]);
        if lambda >= next {
            break;
        }
    }
    let weights = v.iter().zip(p).map(|(&vy, &py)| (vy - lambda * py).max(0.0)).collect();
    Ok(WeightVector { weights, source_marginal: source_marginal.clone() })
}

/// `p_t(y) = w_y p_s(y)`.
pub fn weights_to_target_marginal(w: &WeightVector) -> ProbVector {
    let entries: Vec<f64> = w
        .weights
        .iter()
        .zip(w.source_marginal.as_slice())
        .map(|(a, b)| a * b)
        .collect();
    ProbVector::new(entries).expect("weight invariant implies a valid target marginal")
}

/// How the masses of a [`PredictorTable`] are to be read.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MassKind {
    /// Masses sum to one.
    Probability,
    /// Non-negative counts (or weights) with positive total.
    Count,
}

/// A predictor restricted to finitely many distinct outputs, each carrying
/// a mass. Outputs are grouped by exact bitwise equality.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PredictorTable {
    support: Vec<(ProbVector, f64)>,
    kind: MassKind,
}

impl PredictorTable {
    /// Builds the table, merging duplicate outputs by summing their mass.
    /// Order of first appearance is kept.
    pub fn new(entries: Vec<(ProbVector, f64)>, kind: MassKind) -> Result<Self> {
        let k = entries.first().ok_or(Error::EmptyInput("predictor table"))?.0.len();
        let mut index: BTreeMap<Vec<u64>, usize> = BTreeMap::new();
        let mut support: Vec<(ProbVector, f64)> = Vec::with_capacity(entries.len());
        for (i, (output, mass)) in entries.into_iter().enumerate() {
            if output.len() != k {
                return Err(Error::DimensionMismatch { expected: k, found: output.len() });
            }
            if !(mass.is_finite() && mass >= 0.0) {
                return Err(Error::InvalidEntry { index: i, value: mass });
            }
            match index.get(&output.bit_key()) {
                Some(&slot) => support[slot].1 += mass,
                None => {
                    index.insert(output.bit_key(), support.len());
                    support.push((output, mass));
                }
            }
        }
        let total: f64 = support.iter().map(|(_, m)| m).sum();
        match kind {
            MassKind::Probability if (total - 1.0).abs() > SIMPLEX_TOL => {
                return Err(Error::NotNormalized { sum: total })
            }
            MassKind::Count if total <= 0.0 => return Err(Error::NotNormalized { sum: total }),
            _ => {}
        }
        Ok(Self { support, kind })
    }

    /// Counts each distinct output once per occurrence.
    pub fn from_outputs<I: IntoIterator<Item = ProbVector>>(outputs: I) -> Result<Self> {
        Self::new(outputs.into_iter().map(|o| (o, 1.0)).collect(), MassKind::Count)
    }

    pub fn num_classes(&self) -> usize {
        self.support[0].0.len()
    }

    pub fn len(&self) -> usize {
        self.support.len()
    }

    pub fn is_empty(&self) -> bool {
        self.support.is_empty()
    }

    pub fn kind(&self) -> MassKind {
        self.kind
    }

    pub fn entries(&self) -> &[(ProbVector, f64)] {
        &self.support
    }

    pub fn total_mass(&self) -> f64 {
        self.support.iter().map(|(_, m)| m).sum()
    }

    /// `(output, mass / total)` pairs.
    pub fn normalized(&self) -> impl Iterator<Item = (&ProbVector, f64)> + '_ {
        let total = self.total_mass();
        self.support.iter().map(move |(o, m)| (o, m / total))
    }

    /// Mass-weighted mean output.
    pub fn mean_output(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.num_classes()];
        for (o, pi) in self.normalized() {
            for (m, v) in mean.iter_mut().zip(o.as_slice()) {
                *m += pi * v;
            }
        }
        mean
    }

    /// `E[f fᵀ]` under the table's normalized masses.
    pub fn second_moment(&self) -> crate::linalg::Matrix {
        let k = self.num_classes();
        let mut m = vec![vec![0.0; k]; k];
        for (o, pi) in self.normalized() {
            let f = o.as_slice();
            for i in 0..k {
                for j in 0..k {
                    m[i][j] += pi * f[i] * f[j];
                }
            }
        }
        m
    }
}

/// A source example after applying the predictor: `(f(x), y)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub output: ProbVector,
    pub label: usize,
}

impl LabeledSample {
    pub fn new(output: ProbVector, label: usize) -> Result<Self> {
        if label >= output.len() {
            return Err(Error::LabelOutOfRange { label, classes: output.len() });
        }
        Ok(Self { output, label })
    }
}

/// Checks that all samples share one class count and returns it.
pub(crate) fn sample_classes(samples: &[LabeledSample]) -> Result<usize> {
    let k = samples.first().ok_or(Error::EmptyInput("samples"))?.output.len();
    for s in samples {
        if s.output.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: s.output.len() });
        }
        if s.label >= k {
            return Err(Error::LabelOutOfRange { label: s.label, classes: k });
        }
    }
    Ok(k)
}
