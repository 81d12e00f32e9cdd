//! Hard and soft confusion matrices `p_s(ŷ, y)` and target prediction
//! marginals `p_t(ŷ)`.

use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::linalg::Matrix;
use crate::simplex::{sample_classes, LabeledSample, ProbVector};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConfusionKind {
    /// `ŷ = argmax f(x)`.
    Hard,
    /// `ŷ ~ f(x)`, accumulated in expectation.
    Soft,
}

/// Joint `joint[i][j] = p_s(ŷ = i, y = j)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConfusionMatrix {
    joint: Matrix,
    column_marginal: ProbVector,
    kind: ConfusionKind,
}

impl ConfusionMatrix {
    /// Validates a joint distribution and records its column sums as the
    /// source label marginal.
    pub fn from_joint(joint: Matrix, kind: ConfusionKind) -> Result<Self> {
        let k = joint.len();
        if k == 0 {
            return Err(Error::EmptyInput("confusion matrix"));
        }
        let mut columns = vec![0.0; k];
        for (i, row) in joint.iter().enumerate() {
            if row.len() != k {
                return Err(Error::DimensionMismatch { expected: k, found: row.len() });
            }
            for (j, &v) in row.iter().enumerate() {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::InvalidEntry { index: i * k + j, value: v });
                }
                columns[j] += v;
            }
        }
        let column_marginal = ProbVector::new(columns)?;
        Ok(Self { joint, column_marginal, kind })
    }

    pub fn num_classes(&self) -> usize {
        self.joint.len()
    }

    pub fn kind(&self) -> ConfusionKind {
        self.kind
    }

    pub fn joint(&self) -> &Matrix {
        &self.joint
    }

    /// `p_s(y)`.
    pub fn column_marginal(&self) -> &ProbVector {
        &self.column_marginal
    }

    /// `p_s(ŷ = i)`.
    pub fn row_sums(&self) -> Vec<f64> {
        self.joint.iter().map(|r| r.iter().sum()).collect()
    }
}

fn from_accumulated(mut joint: Matrix, n: usize, kind: ConfusionKind) -> Result<ConfusionMatrix> {
    let n = n as f64;
    joint.iter_mut().flatten().for_each(|v| *v /= n);
    ConfusionMatrix::from_joint(joint, kind)
}

/// `joint[i][j] = #{argmax f(x) = i, y = j} / n`, argmax ties to the
/// lowest index.
pub fn build_hard_confusion(samples: &[LabeledSample]) -> Result<ConfusionMatrix> {
    let k = sample_classes(samples)?;
    let mut joint = vec![vec![0.0; k]; k];
    for s in samples {
        joint[s.output.argmax()][s.label] += 1.0;
    }
    from_accumulated(joint, samples.len(), ConfusionKind::Hard)
}

/// `joint[i][j] = (1/n) Σ_{samples with y = j} f_i(x)`.
pub fn build_soft_confusion(samples: &[LabeledSample]) -> Result<ConfusionMatrix> {
    let k = sample_classes(samples)?;
    let mut joint = vec![vec![0.0; k]; k];
    for s in samples {
        for (i, &fi) in s.output.as_slice().iter().enumerate() {
            joint[i][s.label] += fi;
        }
    }
    from_accumulated(joint, samples.len(), ConfusionKind::Soft)
}

/// `μ̂ = p_t(ŷ)`: argmax frequencies (hard) or mean output (soft).
pub fn build_target_prediction_marginal(outputs: &[ProbVector], kind: ConfusionKind) -> Result<ProbVector> {
    let k = outputs.first().ok_or(Error::EmptyInput("target outputs"))?.len();
    let mut acc = vec![0.0; k];
    for o in outputs {
        if o.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: o.len() });
        }
        match kind {
            ConfusionKind::Hard => acc[o.argmax()] += 1.0,
            ConfusionKind::Soft => acc.iter_mut().zip(o.as_slice()).for_each(|(a, v)| *a += v),
        }
    }
    ProbVector::normalized(acc)
}
