//! Curvature, identifiability and finite-sample bound ingredients of the
//! plug-in likelihood `L(w) = E_t log f(x)ᵀw`.

use alloc::vec;
use alloc::vec::Vec;

use serde::Serialize;

use crate::linalg::{symmetric_eigenvalues, Matrix};
use crate::simplex::{require_positive, WeightVector};
use crate::special::normal_cdf;
use crate::{Error, PredictorTable, ProbVector, Result};

/// Minimum second-moment eigenvalue above which a predictor counts as
/// identifying the weights.
pub const IDENTIFIABILITY_FLOOR: f64 = 1e-10;

/// Slack allowed in the eigenvalue sandwich inequalities.
pub const SANDWICH_SLACK: f64 = 1e-8;

fn check_weights(table: &PredictorTable, w: &[f64]) -> Result<()> {
    if table.num_classes() != w.len() {
        return Err(Error::DimensionMismatch { expected: table.num_classes(), found: w.len() });
    }
    Ok(())
}

/// `(f, π, fᵀw)` for every support point with positive mass.
fn inner_products<'a>(table: &'a PredictorTable, w: &[f64]) -> Result<Vec<(&'a ProbVector, f64, f64)>> {
    check_weights(table, w)?;
    let mut out = Vec::with_capacity(table.len());
    for (index, (f, pi)) in table.normalized().enumerate() {
        if pi == 0.0 {
            continue;
        }
        let s = f.dot(w);
        if !(s > 0.0) {
            return Err(Error::Domain { index, value: s });
        }
        out.push((f, pi, s));
    }
    Ok(out)
}

/// Mass-weighted mean of `log f(x)ᵀw`.
pub fn log_likelihood(table: &PredictorTable, w: &WeightVector) -> Result<f64> {
    log_likelihood_raw(table, w.as_slice())
}

/// [`log_likelihood`] at an arbitrary point, feasible or not.
pub fn log_likelihood_raw(table: &PredictorTable, w: &[f64]) -> Result<f64> {
    Ok(inner_products(table, w)?.iter().map(|(_, pi, s)| pi * libm::log(*s)).sum())
}

/// `E_t[f(x) / f(x)ᵀw]`.
pub fn likelihood_gradient(table: &PredictorTable, w: &WeightVector) -> Result<Vec<f64>> {
    likelihood_gradient_raw(table, w.as_slice())
}

pub fn likelihood_gradient_raw(table: &PredictorTable, w: &[f64]) -> Result<Vec<f64>> {
    let mut g = vec![0.0; w.len()];
    for (f, pi, s) in inner_products(table, w)? {
        let scale = pi / s;
        for (gi, fi) in g.iter_mut().zip(f.as_slice()) {
            *gi += scale * fi;
        }
    }
    Ok(g)
}

/// `−E_t[f(x) f(x)ᵀ / (f(x)ᵀw)²]`, symmetric negative semidefinite.
pub fn likelihood_hessian(table: &PredictorTable, w: &WeightVector) -> Result<Matrix> {
    likelihood_hessian_raw(table, w.as_slice())
}

pub fn likelihood_hessian_raw(table: &PredictorTable, w: &[f64]) -> Result<Matrix> {
    let k = w.len();
    let mut h = vec![vec![0.0; k]; k];
    for (f, pi, s) in inner_products(table, w)? {
        let scale = pi / (s * s);
        let f = f.as_slice();
        for i in 0..k {
            for j in i..k {
                h[i][j] -= scale * f[i] * f[j];
            }
        }
    }
    for i in 0..k {
        for j in 0..i {
            h[i][j] = h[j][i];
        }
    }
    Ok(h)
}

/// `min_{x in support} f(x)ᵀw`, the empirical surrogate for the
/// lower bound τ on target inner products.
pub fn tau(table: &PredictorTable, w: &[f64]) -> Result<f64> {
    check_weights(table, w)?;
    Ok(table
        .normalized()
        .filter(|(_, m)| *m > 0.0)
        .map(|(f, _)| f.dot(w))
        .fold(f64::INFINITY, f64::min)
        .max(0.0))
}

/// Tangent-space projection of `g`: removes the component along `p_s`,
/// the normal of `Σ_y w_y p_s(y) = 1`.
pub fn project_to_tangent(g: &[f64], source_marginal: &ProbVector) -> Vec<f64> {
    let p = source_marginal.as_slice();
    let pp: f64 = p.iter().map(|x| x * x).sum();
    let gp: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
    g.iter().zip(p).map(|(a, b)| a - gp / pp * b).collect()
}

/// Norm of the projected-gradient map `w − Π_W(w + g)`, zero exactly at
/// maximizers of a concave objective over `W`.
pub fn projected_gradient_norm(w: &WeightVector, gradient: &[f64]) -> Result<f64> {
    let moved: Vec<f64> = w.as_slice().iter().zip(gradient).map(|(a, b)| a + b).collect();
    let projected = crate::simplex::project_to_weight_simplex(&moved, w.source_marginal())?;
    Ok(libm::sqrt(w.squared_distance(projected.as_slice())))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Identifiability {
    pub identifiable: bool,
    /// Smallest eigenvalue of the empirical `E[f fᵀ]`.
    pub min_eigenvalue: f64,
}

/// Decides identifiability from the smallest eigenvalue of the table's
/// second moment `E[f fᵀ]`.
pub fn check_identifiability(table: &PredictorTable) -> Result<Identifiability> {
    let eig = symmetric_eigenvalues(&table.second_moment())?;
    let min_eigenvalue = eig[0].max(0.0);
    Ok(Identifiability { identifiable: min_eigenvalue > IDENTIFIABILITY_FLOOR, min_eigenvalue })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundInputs {
    /// `σ_min` of the likelihood with the calibrated predictor.
    pub sigma_min_c: f64,
    /// `σ_min` of the likelihood with the predictor actually used.
    pub sigma_min_f: f64,
    pub tau: f64,
    pub calib_error: f64,
    pub w_star_norm: f64,
    /// Target sample size.
    pub m: usize,
    /// Source (calibration) sample size.
    pub n: usize,
    pub delta: f64,
}

/// Error-bound terms, each up to a universal constant (reported as 1):
///
/// * `term1 = (1/σ_c) √(log(4/δ)/m)`, the estimation error of the
///   calibrated problem,
/// * `term2 = (1/σ_f) (√(log(4/δ)/m) + E(f̂)‖w*‖)`, the price of
///   miscalibration.
///
/// `calibration_sampling` is `‖w*‖ √(log(4/δ)/n)`, the extra term paid when
/// the calibration map itself is fitted on `n` samples; it is not part of
/// `total`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BoundTerms {
    pub term1: f64,
    pub term2: f64,
    pub total: f64,
    pub calibration_sampling: f64,
    /// Multiplicative constant applied, always 1: the terms hold only up
    /// to a universal constant.
    pub constant: f64,
    /// `false` when a zero curvature made the bound infinite.
    pub finite: bool,
}

pub fn compute_bound_terms(inputs: &BoundInputs) -> Result<BoundTerms> {
    let BoundInputs { sigma_min_c, sigma_min_f, tau, calib_error, w_star_norm, m, n, delta } = *inputs;
    if !(delta > 0.0 && delta < 1.0) {
        return Err(Error::InvalidParameter(alloc::format!("delta must lie in (0, 1), got {delta}")));
    }
    if m == 0 || n == 0 {
        return Err(Error::InvalidParameter("sample sizes must be positive".into()));
    }
    for (name, v) in [
        ("sigma_min_c", sigma_min_c),
        ("sigma_min_f", sigma_min_f),
        ("tau", tau),
        ("calib_error", calib_error),
        ("w_star_norm", w_star_norm),
    ] {
        if !(v >= 0.0) || v.is_nan() {
            return Err(Error::InvalidParameter(alloc::format!("{name} must be non-negative, got {v}")));
        }
    }
    let log_term = libm::log(4.0 / delta);
    let rate_m = libm::sqrt(log_term / m as f64);
    let inv = |s: f64| if s > 0.0 { 1.0 / s } else { f64::INFINITY };
    let term1 = inv(sigma_min_c) * rate_m;
    let term2 = inv(sigma_min_f) * (rate_m + calib_error * w_star_norm);
    let total = term1 + term2;
    Ok(BoundTerms {
        term1,
        term2,
        total,
        calibration_sampling: w_star_norm * libm::sqrt(log_term / n as f64),
        constant: 1.0,
        finite: total.is_finite(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SandwichReport {
    /// `σ_{f,w}`: minimum eigenvalue of the negated Hessian at `w`.
    pub sigma_fw: f64,
    /// `σ_f`: minimum eigenvalue of `E_t[f fᵀ]`.
    pub sigma_f: f64,
    pub p_min: f64,
    pub tau: f64,
    pub lower: f64,
    pub upper: f64,
    pub holds: bool,
}

/// Checks `p_min² σ_f ≤ σ_{f,w} ≤ τ⁻² σ_f`.
pub fn eigenvalue_sandwich_check(table: &PredictorTable, w: &WeightVector) -> Result<SandwichReport> {
    let neg_h: Matrix = likelihood_hessian(table, w)?.into_iter().map(|r| r.into_iter().map(|v| -v).collect()).collect();
    let sigma_fw = symmetric_eigenvalues(&neg_h)?[0];
    let sigma_f = symmetric_eigenvalues(&table.second_moment())?[0];
    let p_min = w.source_marginal().min();
    let t = tau(table, w.as_slice())?;
    let lower = p_min * p_min * sigma_f;
    let upper = if t > 0.0 { sigma_f / (t * t) } else { f64::INFINITY };
    let holds = sigma_fw >= lower - SANDWICH_SLACK && sigma_fw <= upper + SANDWICH_SLACK;
    Ok(SandwichReport { sigma_fw, sigma_f, p_min, tau: t, lower, upper, holds })
}

/// Population MLLS on the two-Gaussian threshold example.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Example1 {
    /// Stationary point `w_0 = (2 p_t(x ≤ 0) − 2c) / (1 − 2c)`.
    pub stationary_w0: f64,
    /// `4 |(1 − 2α)(Φ(μ) − c) / (1 − 2c)|`, the error at the stationary
    /// point.
    pub formula_error: f64,
    /// The stationary point clamped to the feasible range `[0, 2]`, which
    /// is the constrained maximizer.
    pub w0: f64,
    /// `‖w − w*‖₁ = 2 |w_0 − 2α|` at the constrained maximizer.
    pub error: f64,
}

/// Sources are balanced, class 0 is `N(μ, 1)`, class 1 is `N(−μ, 1)` and
/// the target puts mass `α` on class 0. The predictor outputs `[c, 1 − c]`
/// on `x ≥ 0` and `[1 − c, c]` otherwise.
pub fn example1_closed_form(alpha: f64, c: f64, mu: f64) -> Result<Example1> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::InvalidParameter(alloc::format!("alpha must lie in [0, 1], got {alpha}")));
    }
    if !(c > 0.0 && c < 1.0) || !mu.is_finite() {
        return Err(Error::InvalidParameter(alloc::format!("need c in (0, 1) and finite mu, got c={c}, mu={mu}")));
    }
    if c == 0.5 {
        return Err(Error::DegenerateClassifier);
    }
    let phi = normal_cdf(mu);
    let pt_neg = alpha * (1.0 - phi) + (1.0 - alpha) * phi;
    let stationary_w0 = (2.0 * pt_neg - 2.0 * c) / (1.0 - 2.0 * c);
    let formula_error = 4.0 * ((1.0 - 2.0 * alpha) * (phi - c) / (1.0 - 2.0 * c)).abs();
    let w0 = stationary_w0.clamp(0.0, 2.0);
    Ok(Example1 { stationary_w0, formula_error, w0, error: 2.0 * (w0 - 2.0 * alpha).abs() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DiagnosticsReport {
    pub log_likelihood: f64,
    pub gradient: Vec<f64>,
    pub hessian: Matrix,
    /// Minimum eigenvalue of the negated Hessian.
    pub sigma_min: f64,
    pub tau: f64,
    pub second_moment_min_eig: f64,
    pub identifiable: bool,
    /// Whether `−H` has no eigenvalue below `−1e−8`.
    pub hessian_nsd: bool,
    pub projected_gradient_norm: f64,
    pub bound_terms: Option<BoundTerms>,
}

/// Evaluates every diagnostic on the target table at `w`.
pub fn diagnose(table: &PredictorTable, w: &WeightVector) -> Result<DiagnosticsReport> {
    require_positive(w.source_marginal())?;
    let log_likelihood = log_likelihood(table, w)?;
    let gradient = likelihood_gradient(table, w)?;
    let hessian = likelihood_hessian(table, w)?;
    let neg_h: Matrix = hessian.iter().map(|r| r.iter().map(|v| -v).collect()).collect();
    let eig = symmetric_eigenvalues(&neg_h)?;
    let id = check_identifiability(table)?;
    Ok(DiagnosticsReport {
        log_likelihood,
        sigma_min: eig[0].max(0.0),
        hessian_nsd: eig[0] >= -1e-8,
        tau: tau(table, w.as_slice())?,
        second_moment_min_eig: id.min_eigenvalue,
        identifiable: id.identifiable,
        projected_gradient_norm: projected_gradient_norm(w, &gradient)?,
        gradient,
        hessian,
        bound_terms: None,
    })
}
