//! Small dense linear algebra: LU with partial pivoting and cyclic Jacobi
//! for symmetric eigenvalues. Matrices are row-major `Vec<Vec<f64>>`; every
//! matrix in this crate is `k x k` with `k` at most a few hundred.

use alloc::vec;
use alloc::vec::Vec;

use crate::{Error, Result};

pub type Matrix = Vec<Vec<f64>>;

fn check_square(a: &[Vec<f64>]) -> Result<usize> {
    let n = a.len();
    if n == 0 {
        return Err(Error::EmptyInput("matrix"));
    }
    for row in a {
        if row.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: row.len() });
        }
    }
    Ok(n)
}

/// `P A = L U` with unit-diagonal `L`, packed into one matrix.
#[derive(Debug, Clone)]
pub struct Lu {
    packed: Matrix,
    perm: Vec<usize>,
    swaps: usize,
}

impl Lu {
    /// Factorizes `a`. Fails only if a pivot is exactly zero.
    pub fn new(a: &[Vec<f64>]) -> Result<Self> {
        let n = check_square(a)?;
        let mut m: Matrix = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let mut swaps = 0;
        for col in 0..n {
            let pivot = (col..n)
                .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                .unwrap_or(col);
            if m[pivot][col] == 0.0 {
                return Err(Error::NotIdentifiable { condition: f64::INFINITY });
            }
            if pivot != col {
                m.swap(pivot, col);
                perm.swap(pivot, col);
                swaps += 1;
            }
            for row in col + 1..n {
                let factor = m[row][col] / m[col][col];
                m[row][col] = factor;
                for j in col + 1..n {
                    m[row][j] -= factor * m[col][j];
                }
            }
        }
        Ok(Self { packed: m, perm, swaps })
    }

    pub fn dim(&self) -> usize {
        self.perm.len()
    }

    pub fn solve(&self, b: &[f64]) -> Result<Vec<f64>> {
        let n = self.dim();
        if b.len() != n {
            return Err(Error::DimensionMismatch { expected: n, found: b.len() });
        }
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            for j in 0..i {
                x[i] -= self.packed[i][j] * x[j];
            }
        }
        for i in (0..n).rev() {
            for j in i + 1..n {
                x[i] -= self.packed[i][j] * x[j];
            }
            x[i] /= self.packed[i][i];
        }
        Ok(x)
    }

    pub fn inverse(&self) -> Matrix {
        let n = self.dim();
        let mut inv = vec![vec![0.0; n]; n];
        let mut e = vec![0.0; n];
        for j in 0..n {
            e.iter_mut().for_each(|v| *v = 0.0);
            e[j] = 1.0;
            let col = self.solve(&e).expect("dimension checked");
            for i in 0..n {
                inv[i][j] = col[i];
            }
        }
        inv
    }

    pub fn determinant(&self) -> f64 {
        let sign = if self.swaps % 2 == 0 { 1.0 } else { -1.0 };
        sign * (0..self.dim()).map(|i| self.packed[i][i]).product::<f64>()
    }
}

/// Maximum absolute column sum.
pub fn norm_1(a: &[Vec<f64>]) -> f64 {
    let n = a.first().map_or(0, Vec::len);
    (0..n)
        .map(|j| a.iter().map(|row| row[j].abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `‖A‖₁ ‖A⁻¹‖₁`; infinite when `a` is exactly singular.
pub fn condition_number_1(a: &[Vec<f64>]) -> Result<f64> {
    check_square(a)?;
    match Lu::new(a) {
        Ok(lu) => Ok(norm_1(a) * norm_1(&lu.inverse())),
        Err(Error::NotIdentifiable { .. }) => Ok(f64::INFINITY),
        Err(e) => Err(e),
    }
}

pub fn mat_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    a.iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

/// `Aᵀ x`.
pub fn mat_t_vec(a: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    let cols = a.first().map_or(0, Vec::len);
    let mut out = vec![0.0; cols];
    for (row, &xi) in a.iter().zip(x) {
        for (o, &r) in out.iter_mut().zip(row) {
            *o += r * xi;
        }
    }
    out
}

/// `Aᵀ A`.
pub fn gram(a: &[Vec<f64>]) -> Matrix {
    let cols = a.first().map_or(0, Vec::len);
    let mut g = vec![vec![0.0; cols]; cols];
    for row in a {
        for i in 0..cols {
            for j in i..cols {
                g[i][j] += row[i] * row[j];
            }
        }
    }
    for i in 0..cols {
        for j in 0..i {
            g[i][j] = g[j][i];
        }
    }
    g
}

const JACOBI_MAX_SWEEPS: usize = 100;

/// Eigenvalues of a symmetric matrix, ascending, by cyclic Jacobi rotations.
///
/// Sweeps until every off-diagonal entry is below `1e-12` in absolute value
/// (scaled by the Frobenius norm when that exceeds one). Only the upper
/// triangle of `a` is read.
pub fn symmetric_eigenvalues(a: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = check_square(a)?;
    let mut m: Matrix = a.to_vec();
    for i in 0..n {
        for j in 0..i {
            m[i][j] = m[j][i];
        }
    }
    let frob = libm::sqrt(m.iter().flatten().map(|v| v * v).sum::<f64>());
    let threshold = 1e-12 * frob.max(1.0);

    for _ in 0..JACOBI_MAX_SWEEPS {
        let off = (0..n)
            .flat_map(|i| (i + 1..n).map(move |j| (i, j)))
            .map(|(i, j)| m[i][j].abs())
            .fold(0.0, f64::max);
        if off <= threshold {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p][q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q][q] - m[p][p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for r in 0..n {
                    let (mrp, mrq) = (m[r][p], m[r][q]);
                    m[r][p] = c * mrp - s * mrq;
                    m[r][q] = s * mrp + c * mrq;
                }
                for r in 0..n {
                    let (mpr, mqr) = (m[p][r], m[q][r]);
                    m[p][r] = c * mpr - s * mqr;
                    m[q][r] = s * mpr + c * mqr;
                }
            }
        }
    }
    let mut eig: Vec<f64> = (0..n).map(|i| m[i][i]).collect();
    eig.sort_by(f64::total_cmp);
    Ok(eig)
}

pub fn min_eigenvalue(a: &[Vec<f64>]) -> Result<f64> {
    Ok(symmetric_eigenvalues(a)?[0])
}

pub fn max_eigenvalue(a: &[Vec<f64>]) -> Result<f64> {
    Ok(*symmetric_eigenvalues(a)?.last().expect("nonempty"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn lu_solves_small_system() {
        let a = vec![vec![0.4, 0.1], vec![0.1, 0.4]];
        let x = Lu::new(&a).unwrap().solve(&[0.35, 0.65]).unwrap();
        assert!((x[0] - 0.5).abs() < 1e-14 && (x[1] - 1.5).abs() < 1e-14);
    }

    #[test]
    fn lu_pivots_and_reports_determinant() {
        let a = vec![vec![0.0, 2.0, 1.0], vec![1.0, 1.0, 0.0], vec![3.0, 0.0, 1.0]];
        let lu = Lu::new(&a).unwrap();
        // cofactor expansion along the first row: -2(1) + 1(-3) = -5
        assert!((lu.determinant() + 5.0).abs() < 1e-12);
        let inv = lu.inverse();
        for i in 0..3 {
            for j in 0..3 {
                let v: f64 = (0..3).map(|t| a[i][t] * inv[t][j]).sum();
                assert!((v - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn singular_matrix_has_infinite_condition() {
        let a = vec![vec![0.25, 0.25], vec![0.25, 0.25]];
        assert!(condition_number_1(&a).unwrap().is_infinite() || condition_number_1(&a).unwrap() > 1e15);
    }

    #[test]
    fn jacobi_matches_closed_form_2x2() {
        let (a, b, c) = (2.0, 0.7, -1.0);
        let m = vec![vec![a, b], vec![b, c]];
        let eig = symmetric_eigenvalues(&m).unwrap();
        let mean = 0.5 * (a + c);
        let rad = libm::sqrt(0.25 * (a - c) * (a - c) + b * b);
        assert!((eig[0] - (mean - rad)).abs() < 1e-14);
        assert!((eig[1] - (mean + rad)).abs() < 1e-14);
    }

    #[test]
    fn jacobi_trace_and_determinant_invariants() {
        let m = vec![
            vec![4.0, 1.0, -2.0, 0.5],
            vec![1.0, 3.0, 0.0, 1.0],
            vec![-2.0, 0.0, 5.0, -1.0],
            vec![0.5, 1.0, -1.0, 2.0],
        ];
        let eig = symmetric_eigenvalues(&m).unwrap();
        let trace: f64 = (0..4).map(|i| m[i][i]).sum();
        assert!((eig.iter().sum::<f64>() - trace).abs() < 1e-12);
        let det = Lu::new(&m).unwrap().determinant();
        assert!((eig.iter().product::<f64>() - det).abs() < 1e-10 * det.abs());
    }
}
