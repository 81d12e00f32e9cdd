//! Label-shift estimators.
//!
//! All of them solve, in one form or another, the distribution-matching
//! equations `Σ_y p_s(z, y) w_y = p_t(z)` over the weight simplex `W`:
//!
//! | method       | matching                                   | solver                 |
//! |--------------|--------------------------------------------|------------------------|
//! | `bbse_hard`  | `Ĉ w = μ̂` with the argmax confusion matrix | LU                     |
//! | `bbse_soft`  | same, expected (soft) confusion matrix      | LU                     |
//! | `rlls`       | `‖Ĉw − μ̂‖² + λ‖w − 1‖²`                    | projected gradient     |
//! | `mlls_em`    | `max_w E_t log f(x)ᵀw`                      | EM fixed point         |
//! | `mlls_grad`  | same objective                              | spectral proj. gradient|
//! | `mlls_cm`    | likelihood on confusion-row calibrated `f`  | EM                     |

use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::calibration::confusion_row_calibrate;
use crate::confusion::{
    build_hard_confusion, build_soft_confusion, build_target_prediction_marginal, ConfusionKind, ConfusionMatrix,
};
use crate::diagnostics::{likelihood_gradient_raw, likelihood_hessian_raw, log_likelihood, log_likelihood_raw};
use crate::linalg::{condition_number_1, gram, mat_t_vec, mat_vec, symmetric_eigenvalues, Lu};
use crate::simplex::{project_to_weight_simplex, require_positive, sample_classes, SIMPLEX_TOL};
use crate::{Error, LabeledSample, MassKind, PredictorTable, ProbVector, Result, WeightVector};

/// Confusion matrices with a larger 1-norm condition estimate are treated
/// as singular.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    BbseHard,
    BbseSoft,
    Rlls,
    MllsEm,
    MllsGrad,
    MllsCm,
}

impl Method {
    pub const ALL: [Method; 6] =
        [Method::BbseHard, Method::BbseSoft, Method::Rlls, Method::MllsEm, Method::MllsGrad, Method::MllsCm];

    pub fn name(self) -> &'static str {
        match self {
            Method::BbseHard => "bbse_hard",
            Method::BbseSoft => "bbse_soft",
            Method::Rlls => "rlls",
            Method::MllsEm => "mlls_em",
            Method::MllsGrad => "mlls_grad",
            Method::MllsCm => "mlls_cm",
        }
    }

    /// Whether the method consumes labeled source samples beyond `p_s`.
    pub fn needs_source_samples(self) -> bool {
        !matches!(self, Method::MllsEm | Method::MllsGrad)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::InvalidParameter(alloc::format!("unknown method `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    pub method: Method,
    pub max_iters: usize,
    /// Stop when the ∞-norm change of `w` between iterations drops below this.
    pub tol: f64,
    pub rlls_lambda: f64,
    /// BBSE only: clip negative weights and project back onto `W`.
    pub clip_negative: bool,
    /// Accelerate EM by SQUAREM extrapolation.
    pub accelerate_em: bool,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self { method: Method::MllsEm, max_iters: 10_000, tol: 1e-8, rlls_lambda: 1e-3, clip_negative: false, accelerate_em: true }
    }
}

impl EstimatorConfig {
    pub fn with_method(method: Method) -> Self {
        Self { method, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iters == 0 {
            return Err(Error::InvalidParameter("max_iters must be at least 1".into()));
        }
        if !(self.tol > 0.0 && self.tol.is_finite()) {
            return Err(Error::InvalidParameter(alloc::format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.rlls_lambda >= 0.0 && self.rlls_lambda.is_finite()) {
            return Err(Error::InvalidParameter(alloc::format!(
                "rlls_lambda must be non-negative, got {}",
                self.rlls_lambda
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimateResult {
    pub weights: WeightVector,
    pub iterations: usize,
    /// Method-specific: residual norm for moment matching, mean
    /// log-likelihood for MLLS.
    pub final_objective: f64,
    pub converged: bool,
}

/// Wraps raw weights, projecting onto `W` if rounding pushed them off it.
fn finalize(w: Vec<f64>, source_marginal: &ProbVector) -> Result<WeightVector> {
    if w.iter().all(|&x| x >= 0.0) && (source_marginal.dot(&w) - 1.0).abs() <= SIMPLEX_TOL {
        return WeightVector::new(w, source_marginal.clone());
    }
    project_to_weight_simplex(&w, source_marginal)
}

fn check_mu(confusion: &ConfusionMatrix, mu: &ProbVector) -> Result<()> {
    if mu.len() != confusion.num_classes() {
        return Err(Error::DimensionMismatch { expected: confusion.num_classes(), found: mu.len() });
    }
    Ok(())
}

fn residual_norm(a: &[Vec<f64>], w: &[f64], b: &[f64]) -> f64 {
    libm::sqrt(mat_vec(a, w).iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Black-box shift estimation: `ŵ = Ĉ⁻¹ μ̂`.
///
/// The weights live on the simplex defined by the confusion matrix's own
/// column marginal. Negative solutions are an error unless
/// `clip_negative`, in which case they are clipped to zero and projected.
pub fn bbse(confusion: &ConfusionMatrix, mu: &ProbVector, clip_negative: bool) -> Result<EstimateResult> {
    check_mu(confusion, mu)?;
    let c = confusion.joint();
    let condition = condition_number_1(c)?;
    if !(condition <= MAX_CONDITION) {
        return Err(Error::NotIdentifiable { condition });
    }
    let raw = Lu::new(c)?.solve(mu.as_slice())?;
    let p_s = confusion.column_marginal();
    let weights = if raw.iter().any(|&x| x < 0.0) {
        if !clip_negative {
            return Err(Error::InfeasibleWeights { weights: raw });
        }
        let clipped: Vec<f64> = raw.iter().map(|&x| x.max(0.0)).collect();
        project_to_weight_simplex(&clipped, p_s)?
    } else {
        finalize(raw, p_s)?
    };
    let final_objective = residual_norm(c, weights.as_slice(), mu.as_slice());
    Ok(EstimateResult { weights, iterations: 1, final_objective, converged: true })
}

/// Projected gradient descent on a convex quadratic
/// `‖A w − b‖² + λ ‖w − anchor‖²` over `W`, with step `1/L`.
fn projected_least_squares(
    a: &[Vec<f64>],
    b: &[f64],
    lambda: f64,
    anchor: &[f64],
    start: Vec<f64>,
    source_marginal: &ProbVector,
    config: &EstimatorConfig,
) -> Result<(WeightVector, usize, bool)> {
    let g = gram(a);
    let lipschitz = 2.0 * (symmetric_eigenvalues(&g)?.last().copied().unwrap_or(0.0) + lambda);
    let mut w = project_to_weight_simplex(&start, source_marginal)?;
    if lipschitz <= 0.0 {
        return Ok((w, 0, true));
    }
    let step = 1.0 / lipschitz;
    for it in 1..=config.max_iters {
        let resid: Vec<f64> = mat_vec(a, w.as_slice()).iter().zip(b).map(|(x, y)| x - y).collect();
        let grad = mat_t_vec(a, &resid);
        let next: Vec<f64> = w
            .as_slice()
            .iter()
            .zip(&grad)
            .zip(anchor)
            .map(|((wi, gi), ai)| wi - step * 2.0 * (gi + lambda * (wi - ai)))
            .collect();
        let next = project_to_weight_simplex(&next, source_marginal)?;
        let change = max_abs_diff(next.as_slice(), w.as_slice());
        w = next;
        if change < config.tol {
            return Ok((w, it, true));
        }
    }
    Ok((w, config.max_iters, false))
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

/// Regularized least squares: minimizes `‖Ĉw − μ̂‖² + λ‖w − 1‖²` over `W`.
/// `final_objective` is the regularized objective at the returned point.
pub fn rlls(confusion: &ConfusionMatrix, mu: &ProbVector, lambda: f64, config: &EstimatorConfig) -> Result<EstimateResult> {
    check_mu(confusion, mu)?;
    config.validate()?;
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidParameter(alloc::format!("lambda must be non-negative, got {lambda}")));
    }
    let k = confusion.num_classes();
    let p_s = confusion.column_marginal();
    require_positive(p_s)?;
    let ones = vec![1.0; k];
    let (weights, iterations, converged) =
        projected_least_squares(confusion.joint(), mu.as_slice(), lambda, &ones, ones.clone(), p_s, config)?;
    let r = residual_norm(confusion.joint(), weights.as_slice(), mu.as_slice());
    let final_objective = r * r + lambda * weights.squared_distance(&ones);
    Ok(EstimateResult { weights, iterations, final_objective, converged })
}

fn check_table(table: &PredictorTable, source_marginal: &ProbVector) -> Result<()> {
    if table.num_classes() != source_marginal.len() {
        return Err(Error::DimensionMismatch { expected: source_marginal.len(), found: table.num_classes() });
    }
    require_positive(source_marginal)
}

/// Curvature floor and cap used when turning the projected-gradient norm
/// into a distance-to-optimum certificate.
const CERTIFICATE_CURVATURE: (f64, f64) = (1e-4, 1.0);

/// Stationarity test shared by the likelihood solvers.
///
/// For a concave objective with curvature at least `σ` on `W`, the distance
/// to the maximizer is at most about `‖w − Π_W(w + ∇L)‖ / σ`. A point is
/// accepted when that bound, with `σ` the smallest eigenvalue of `−∇²L`
/// clamped to [`CERTIFICATE_CURVATURE`], is below `tol`, or when the map is
/// at rounding level. Merely small steps are never enough: both solvers
/// can crawl far from the optimum.
fn certified(table: &PredictorTable, w: &[f64], source_marginal: &ProbVector, tol: f64) -> Result<bool> {
    let map = stationarity_map(table, w, source_marginal)?.0;
    certify_map(table, w, map, tol)
}

/// `‖w − Π(w + ∇L(w))‖∞` together with `Π(w + ∇L(w))`.
fn stationarity_map(table: &PredictorTable, w: &[f64], source_marginal: &ProbVector) -> Result<(f64, Vec<f64>)> {
    let g = likelihood_gradient_raw(table, w)?;
    let moved: Vec<f64> = w.iter().zip(&g).map(|(a, b)| a + b).collect();
    let target = project_to_weight_simplex(&moved, source_marginal)?.as_slice().to_vec();
    Ok((max_abs_diff(&target, w), target))
}

fn certify_map(table: &PredictorTable, w: &[f64], map: f64, tol: f64) -> Result<bool> {
    // Below this the map is rounding noise and no solver can shrink it.
    let noise = 64.0 * f64::EPSILON * w.iter().copied().fold(1.0, f64::max);
    if map <= noise {
        return Ok(true);
    }
    if map > tol * CERTIFICATE_CURVATURE.1 {
        return Ok(false);
    }
    let neg_h: Vec<Vec<f64>> =
        likelihood_hessian_raw(table, w)?.into_iter().map(|r| r.into_iter().map(|v| -v).collect()).collect();
    let sigma = symmetric_eigenvalues(&neg_h)?[0].clamp(CERTIFICATE_CURVATURE.0, CERTIFICATE_CURVATURE.1);
    Ok(map <= tol * sigma)
}

const POLISH_STEPS: usize = 8;

/// Newton steps on the face of `W` picked out by `Π(w + ∇L(w))`, each kept
/// only if it shrinks the stationarity map. Near the optimum the gain in
/// `L` is below its rounding while the map is still computed accurately,
/// so first-order iterations stall there; a few Newton steps finish the
/// job. Returns the polished point and whether it is certified.
fn newton_polish(table: &PredictorTable, w: &[f64], source_marginal: &ProbVector, tol: f64) -> Result<(Vec<f64>, bool)> {
    let p = source_marginal.as_slice();
    let mut w = w.to_vec();
    let (mut map, mut target) = stationarity_map(table, &w, source_marginal)?;
    for _ in 0..POLISH_STEPS {
        if certify_map(table, &w, map, tol)? {
            return Ok((w, true));
        }
        let free: Vec<usize> = (0..w.len()).filter(|&i| target[i] > 0.0).collect();
        let g = likelihood_gradient_raw(table, &w)?;
        let h = likelihood_hessian_raw(table, &w)?;
        // Model around `w` with the bound coordinates moved to zero.
        let n = free.len();
        let mut a = vec![vec![0.0; n + 1]; n + 1];
        let mut rhs = vec![0.0; n + 1];
        for (r, &i) in free.iter().enumerate() {
            for (c, &j) in free.iter().enumerate() {
                a[r][c] = -h[i][j];
            }
            a[r][n] = p[i];
            a[n][r] = p[i];
            rhs[r] = g[i] - (0..w.len()).filter(|j| target[*j] <= 0.0).map(|j| h[i][j] * w[j]).sum::<f64>();
        }
        rhs[n] = 1.0 - free.iter().map(|&i| p[i] * w[i]).sum::<f64>();
        let Ok(lu) = Lu::new(&a) else { break };
        let step = lu.solve(&rhs)?;
        let mut next = vec![0.0; w.len()];
        for (r, &i) in free.iter().enumerate() {
            next[i] = w[i] + step[r];
        }
        if next.iter().any(|&x| !(x >= 0.0)) {
            break;
        }
        let Ok((next_map, next_target)) = stationarity_map(table, &next, source_marginal) else { break };
        if !(next_map < map) {
            break;
        }
        (w, map, target) = (next, next_map, next_target);
    }
    let ok = certify_map(table, &w, map, tol)?;
    Ok((w, ok))
}

/// Maximum-likelihood label shift by expectation-maximization.
///
/// With `f(x) = p_s(y | x)`, the target posterior is proportional to
/// `f_y(x) w_y`. Each iteration sets `q_t(y)` to the mean of these
/// posteriors over the target table and `w = q_t / p_s`, starting from
/// `q_t = p_s`. The log-likelihood never decreases.
pub fn mlls_em(table: &PredictorTable, source_marginal: &ProbVector, config: &EstimatorConfig) -> Result<EstimateResult> {
    mlls_em_observed(table, source_marginal, config, |_, _| {})
}

/// One EM update of `w` in place; returns the ∞-norm change.
fn em_step(entries: &[(&[f64], f64)], p: &[f64], w: &mut [f64], acc: &mut [f64]) -> Result<f64> {
    acc.iter_mut().for_each(|a| *a = 0.0);
    for (index, &(f, pi)) in entries.iter().enumerate() {
        let s: f64 = f.iter().zip(w.iter()).map(|(a, b)| a * b).sum();
        if !(s > 0.0) {
            return Err(Error::Domain { index, value: s });
        }
        let scale = pi / s;
        for (a, fy) in acc.iter_mut().zip(f) {
            *a += scale * fy;
        }
    }
    // q_t(y) = w_y acc_y; the new weight is q_t(y) / p_s(y).
    let mut change = 0.0f64;
    for (y, wy) in w.iter_mut().enumerate() {
        let next = *wy * acc[y] / p[y];
        change = change.max((next - *wy).abs());
        *wy = next;
    }
    Ok(change)
}

/// [`mlls_em`] calling `observer(iteration, w)` after every accepted
/// iterate.
///
/// With `accelerate_em`, iterates are SQUAREM extrapolations of two EM
/// updates followed by a stabilizing EM update, kept only if the
/// likelihood does not fall below the plain double update; otherwise each
/// iterate is one EM update. Either way the likelihood is non-decreasing.
pub fn mlls_em_observed(
    table: &PredictorTable,
    source_marginal: &ProbVector,
    config: &EstimatorConfig,
    mut observer: impl FnMut(usize, &[f64]),
) -> Result<EstimateResult> {
    check_table(table, source_marginal)?;
    config.validate()?;
    let k = table.num_classes();
    let p = source_marginal.as_slice();
    let entries: Vec<(&[f64], f64)> = table.normalized().map(|(o, m)| (o.as_slice(), m)).collect();

    let mut w = vec![1.0; k];
    let mut acc = vec![0.0; k];
    let mut next_polish = 0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        let before = w.clone();
        let mut change = em_step(&entries, p, &mut w, &mut acc)?;
        iterations += 1;
        if config.accelerate_em && change >= config.tol && iterations < config.max_iters {
            let w1 = w.clone();
            em_step(&entries, p, &mut w, &mut acc)?;
            iterations += 1;
            if let Some(next) = squarem(&entries, p, &before, &w1, &w, &mut acc)? {
                w = next;
            }
            change = max_abs_diff(&w, &before);
        }
        observer(iterations, &w);
        if change < config.tol {
            if change == 0.0 || certified(table, &w, source_marginal, config.tol)? {
                converged = true;
                break;
            }
            if iterations >= next_polish {
                next_polish = iterations + POLISH_INTERVAL;
                let (polished, ok) = newton_polish(table, &w, source_marginal, config.tol)?;
                if ok {
                    w = polished;
                    observer(iterations, &w);
                    converged = true;
                    break;
                }
            }
        }
    }
    let weights = finalize(w, source_marginal)?;
    let final_objective = log_likelihood(table, &weights)?;
    Ok(EstimateResult { weights, iterations, final_objective, converged })
}

/// EM iterations between Newton polish attempts once EM has stalled.
const POLISH_INTERVAL: usize = 100;

/// SQUAREM step from `w0` given `w1 = EM(w0)` and `w2 = EM(w1)`. Returns
/// `EM(extrapolated)` if it improves on `w2`.
fn squarem(
    entries: &[(&[f64], f64)],
    p: &[f64],
    w0: &[f64],
    w1: &[f64],
    w2: &[f64],
    acc: &mut [f64],
) -> Result<Option<Vec<f64>>> {
    let r: Vec<f64> = w1.iter().zip(w0).map(|(a, b)| a - b).collect();
    let v: Vec<f64> = w2.iter().zip(w1).zip(&r).map(|((a, b), c)| a - b - c).collect();
    let (rr, vv) = (r.iter().map(|x| x * x).sum::<f64>(), v.iter().map(|x| x * x).sum::<f64>());
    if !(vv > 0.0) {
        return Ok(None);
    }
    let mut alpha = -libm::sqrt(rr / vv);
    if alpha > -1.0 {
        return Ok(None);
    }
    let Some(base) = try_log_likelihood(entries, w2) else { return Ok(None) };
    // Pull the step back toward alpha = -1 (which reproduces w2) until the
    // point stays strictly inside the orthant; EM cannot revive a zero.
    for _ in 0..30 {
        let x: Vec<f64> =
            w0.iter().zip(&r).zip(&v).map(|((a, b), c)| a - 2.0 * alpha * b + alpha * alpha * c).collect();
        if x.iter().all(|&xi| xi > 0.0) {
            let mut x = x;
            // Extrapolation preserves Σ p_y w_y = 1 up to rounding; one EM
            // update restores it exactly.
            if em_step(entries, p, &mut x, acc).is_ok() {
                if let Some(l) = try_log_likelihood(entries, &x) {
                    if l >= base {
                        return Ok(Some(x));
                    }
                }
            }
        }
        alpha = 0.5 * (alpha - 1.0);
        if alpha > -1.0 - 1e-9 {
            break;
        }
    }
    Ok(None)
}

/// Mean log-likelihood, or `None` if some `f(x)ᵀ w <= 0`.
fn try_log_likelihood(entries: &[(&[f64], f64)], w: &[f64]) -> Option<f64> {
    let mut total = 0.0;
    for &(f, pi) in entries {
        let s: f64 = f.iter().zip(w).map(|(a, b)| a * b).sum();
        if !(s > 0.0) {
            if pi == 0.0 {
                continue;
            }
            return None;
        }
        total += pi * libm::log(s);
    }
    Some(total)
}

const SPECTRAL_STEP: (f64, f64) = (1e-10, 1e10);

/// `g·d` for a direction `d` tangent to `Σ p_y w_y = 1`, with the component
/// of `g` along `p` removed first. Near the optimum `g` is almost parallel
/// to `p`, and the plain product drowns in the rounding of `p·d`.
fn tangent_dot(g: &[f64], d: &[f64], p: &[f64]) -> f64 {
    let c = g.iter().zip(p).map(|(a, b)| a * b).sum::<f64>() / p.iter().map(|b| b * b).sum::<f64>();
    g.iter().zip(p).zip(d).map(|((a, b), x)| (a - c * b) * x).sum()
}
const ARMIJO: f64 = 1e-4;

/// Maximum-likelihood label shift by projected gradient ascent over `W`.
///
/// Spectral projected gradient: the trial step is the Barzilai-Borwein
/// length `sᵀs / −sᵀy` of the previous move, the search direction is
/// `d = Π_W(w + α∇L) − w`, and `w + λd` is accepted by Armijo backtracking
/// (`λ` halved) on `L(w + λd) >= L(w) + 1e-4 λ ∇L·d`, or on
/// `∇L(w + λd)·d >= 0`, which by concavity also guarantees ascent.
pub fn mlls_grad(table: &PredictorTable, source_marginal: &ProbVector, config: &EstimatorConfig) -> Result<EstimateResult> {
    check_table(table, source_marginal)?;
    config.validate()?;
    let entries: Vec<(&[f64], f64)> = table.normalized().map(|(o, m)| (o.as_slice(), m)).collect();

    let p = source_marginal.as_slice();
    let mut w = vec![1.0; p.len()];
    let mut value = log_likelihood_raw(table, &w)?;
    let mut grad = likelihood_gradient_raw(table, &w)?;
    let mut alpha = 1.0;
    let mut converged = false;
    let mut iterations = 0;
    while iterations < config.max_iters {
        iterations += 1;
        let moved: Vec<f64> = w.iter().zip(&grad).map(|(a, g)| a + alpha * g).collect();
        let target = project_to_weight_simplex(&moved, source_marginal)?;
        let d: Vec<f64> = target.as_slice().iter().zip(&w).map(|(a, b)| a - b).collect();
        let slope = tangent_dot(&grad, &d, p);
        if !(slope > 0.0) {
            if alpha != 1.0 {
                // Rounding defeated a long spectral step; retry with a unit one.
                alpha = 1.0;
                continue;
            }
            // The slope is below the rounding of `g·d`.
            (w, converged) = newton_polish(table, &w, source_marginal, config.tol)?;
            converged |= slope == 0.0;
            break;
        }
        let mut lambda = 1.0;
        let accepted = loop {
            let candidate: Vec<f64> = w.iter().zip(&d).map(|(a, b)| a + lambda * b).collect();
            if let Some(v) = try_log_likelihood(&entries, &candidate) {
                let g = likelihood_gradient_raw(table, &candidate)?;
                // Along the segment L is concave, so a non-negative slope at
                // the candidate proves ascent even when the gain is below
                // the rounding of L itself.
                let still_rising = tangent_dot(&g, &d, p) >= 0.0;
                if v >= value + ARMIJO * lambda * slope || still_rising {
                    break Some((candidate, v, g));
                }
            }
            lambda *= 0.5;
            if lambda < 1e-20 {
                break None;
            }
        };
        let Some((next, next_value, next_grad)) = accepted else {
            if alpha != 1.0 {
                alpha = 1.0;
                continue;
            }
            (w, converged) = newton_polish(table, &w, source_marginal, config.tol)?;
            break;
        };
        let s: Vec<f64> = next.iter().zip(&w).map(|(a, b)| a - b).collect();
        let ss: f64 = s.iter().map(|x| x * x).sum();
        // Curvature of −L along s; non-negative by concavity.
        let sy: f64 = -s.iter().zip(next_grad.iter().zip(&grad)).map(|(si, (a, b))| si * (a - b)).sum::<f64>();
        alpha = if sy > 0.0 { (ss / sy).clamp(SPECTRAL_STEP.0, SPECTRAL_STEP.1) } else { SPECTRAL_STEP.1 };
        let change = max_abs_diff(&next, &w);
        w = next;
        value = next_value;
        grad = next_grad;
        if change < config.tol && certified(table, &w, source_marginal, config.tol)? {
            converged = true;
            break;
        }
    }
    let weights = finalize(w, source_marginal)?;
    let final_objective = log_likelihood(table, &weights)?;
    Ok(EstimateResult { weights, iterations, final_objective, converged })
}

/// Groups target outputs by their confusion-row calibrated value.
pub fn confusion_calibrated_target_table(source: &[LabeledSample], target_outputs: &[ProbVector]) -> Result<PredictorTable> {
    let calibrator = confusion_row_calibrate(&build_hard_confusion(source)?)?;
    if target_outputs.is_empty() {
        return Err(Error::EmptyInput("target outputs"));
    }
    let k = calibrator.rows().len();
    let mut counts = vec![0.0; k];
    for o in target_outputs {
        if o.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: o.len() });
        }
        counts[o.argmax()] += 1.0;
    }
    let entries = calibrator
        .rows()
        .iter()
        .cloned()
        .zip(counts)
        .filter(|(_, c)| *c > 0.0)
        .collect();
    PredictorTable::new(entries, MassKind::Count)
}

/// MLLS with confusion-matrix calibration: every target output is replaced
/// by `p_s(y | ŷ_x)` from the source hard confusion matrix, then
/// [`mlls_em`] runs on the resulting (at most `k`-point) table.
pub fn mlls_cm(
    source: &[LabeledSample],
    target_outputs: &[ProbVector],
    source_marginal: &ProbVector,
    config: &EstimatorConfig,
) -> Result<EstimateResult> {
    let table = confusion_calibrated_target_table(source, target_outputs)?;
    mlls_em(&table, source_marginal, config)
}

/// Result of [`distribution_match_lsq`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LsqMatch {
    pub estimate: EstimateResult,
    /// Smallest eigenvalue of `JᵀJ`.
    pub min_eigenvalue: f64,
    /// `false` when `JᵀJ` is numerically rank deficient; the returned
    /// point is then one of many minimizers.
    pub identifiable: bool,
}

/// Least-squares distribution matching over a finite latent space:
/// minimizes `‖J w − t‖²` over `W`, with `J[z][y] = p_s(z, y)` and
/// `t[z] = p_t(z)`. `final_objective` is the squared residual.
///
/// Iterates from the minimum-norm point of `W`; gradients lie in the row
/// space of `J`, so on rank-deficient problems the iterates stay near the
/// minimum-norm minimizer.
pub fn distribution_match_lsq(
    joint: &[Vec<f64>],
    target: &[f64],
    source_marginal: &ProbVector,
    config: &EstimatorConfig,
) -> Result<LsqMatch> {
    config.validate()?;
    let k = source_marginal.len();
    if joint.is_empty() {
        return Err(Error::EmptyInput("joint"));
    }
    if target.len() != joint.len() {
        return Err(Error::DimensionMismatch { expected: joint.len(), found: target.len() });
    }
    let mut columns = vec![0.0; k];
    for row in joint {
        if row.len() != k {
            return Err(Error::DimensionMismatch { expected: k, found: row.len() });
        }
        for (c, v) in columns.iter_mut().zip(row) {
            *c += v;
        }
    }
    for (class, (c, p)) in columns.iter().zip(source_marginal.as_slice()).enumerate() {
        if (c - p).abs() > 1e-6 {
            return Err(Error::InvalidParameter(alloc::format!(
                "joint column {class} sums to {c}, source marginal is {p}"
            )));
        }
    }
    require_positive(source_marginal)?;

    let eig = symmetric_eigenvalues(&gram(joint))?;
    let (min_eigenvalue, max_eigenvalue) = (eig[0], eig[k - 1]);
    let identifiable = min_eigenvalue > 1e-10 * max_eigenvalue.max(f64::MIN_POSITIVE);

    let p = source_marginal.as_slice();
    let norm_sq: f64 = p.iter().map(|x| x * x).sum();
    let start: Vec<f64> = p.iter().map(|x| x / norm_sq).collect();
    let zeros = vec![0.0; k];
    let (weights, iterations, converged) =
        projected_least_squares(joint, target, 0.0, &zeros, start, source_marginal, config)?;
    let r = residual_norm(joint, weights.as_slice(), target);
    Ok(LsqMatch {
        estimate: EstimateResult { weights, iterations, final_objective: r * r, converged },
        min_eigenvalue,
        identifiable,
    })
}

/// Squared MMD between the target distribution over `z` and the reweighted
/// source, using the one-hot feature map `φ(z) = e_z` (kernel
/// `k(z, z') = 1{z = z'}`), expanded as
/// `E k(t, t') − 2 E k(t, s_w) + E k(s_w, s_w')`.
pub fn mmd_squared_one_hot(joint: &[Vec<f64>], target: &[f64], w: &[f64]) -> f64 {
    let matched = mat_vec(joint, w);
    let tt: f64 = target.iter().map(|t| t * t).sum();
    let ts: f64 = target.iter().zip(&matched).map(|(t, s)| t * s).sum();
    let ss: f64 = matched.iter().map(|s| s * s).sum();
    tt - 2.0 * ts + ss
}

/// Inputs shared by every estimator: labeled source outputs, unlabeled
/// target outputs and the source label marginal used by the likelihood
/// methods.
#[derive(Debug, Clone, Copy)]
pub struct EstimationData<'a> {
    pub source: &'a [LabeledSample],
    pub target: &'a [ProbVector],
    pub source_marginal: &'a ProbVector,
}

/// Runs `config.method` on the data.
pub fn estimate(config: &EstimatorConfig, data: EstimationData<'_>) -> Result<EstimateResult> {
    config.validate()?;
    if data.target.is_empty() {
        return Err(Error::EmptyInput("target outputs"));
    }
    if config.method.needs_source_samples() {
        let k = sample_classes(data.source)?;
        if k != data.target[0].len() {
            return Err(Error::DimensionMismatch { expected: k, found: data.target[0].len() });
        }
    }
    match config.method {
        Method::BbseHard => {
            let c = build_hard_confusion(data.source)?;
            let mu = build_target_prediction_marginal(data.target, ConfusionKind::Hard)?;
            bbse(&c, &mu, config.clip_negative)
        }
        Method::BbseSoft => {
            let c = build_soft_confusion(data.source)?;
            let mu = build_target_prediction_marginal(data.target, ConfusionKind::Soft)?;
            bbse(&c, &mu, config.clip_negative)
        }
        Method::Rlls => {
            let c = build_hard_confusion(data.source)?;
            let mu = build_target_prediction_marginal(data.target, ConfusionKind::Hard)?;
            rlls(&c, &mu, config.rlls_lambda, config)
        }
        Method::MllsEm => mlls_em(&PredictorTable::from_outputs(data.target.iter().cloned())?, data.source_marginal, config),
        Method::MllsGrad => {
            mlls_grad(&PredictorTable::from_outputs(data.target.iter().cloned())?, data.source_marginal, config)
        }
        Method::MllsCm => mlls_cm(data.source, data.target, data.source_marginal, config),
    }
}

/// Human-readable list of accepted method names.
pub fn method_names() -> String {
    let names: Vec<&str> = Method::ALL.iter().map(|m| m.name()).collect();
    names.join(", ")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pv(v: &[f64]) -> ProbVector {
        ProbVector::new(v.to_vec()).unwrap()
    }

    fn hard(joint: Vec<Vec<f64>>) -> ConfusionMatrix {
        ConfusionMatrix::from_joint(joint, ConfusionKind::Hard).unwrap()
    }

    fn tight() -> EstimatorConfig {
        EstimatorConfig { tol: 1e-12, max_iters: 100_000, ..EstimatorConfig::default() }
    }

    /// 1-D grid search over `w_0` on the two-class simplex.
    fn grid_argmax_2d(p0: f64, step: f64, objective: impl Fn(f64, f64) -> f64) -> f64 {
        let max_w0 = 1.0 / p0;
        let n = (max_w0 / step).round() as usize;
        let mut best = (f64::NEG_INFINITY, 0.0);
        for i in 0..=n {
            let w0 = (i as f64 * step).min(max_w0);
            let w1 = ((1.0 - p0 * w0) / (1.0 - p0)).max(0.0);
            let v = objective(w0, w1);
            if v > best.0 {
                best = (v, w0);
            }
        }
        best.1
    }

    #[test]
    fn bbse_hand_solved() {
        let r = bbse(&hard(vec![vec![0.4, 0.1], vec![0.1, 0.4]]), &pv(&[0.35, 0.65]), false).unwrap();
        assert!((r.weights.as_slice()[0] - 0.5).abs() < 1e-14);
        assert!((r.weights.as_slice()[1] - 1.5).abs() < 1e-14);
        assert!(r.weights.constraint_residual() < 1e-15);
        assert!(r.final_objective < 1e-15);
    }

    #[test]
    fn bbse_diagonal_is_ratio() {
        let r = bbse(&hard(vec![vec![0.2, 0.0, 0.0], vec![0.0, 0.3, 0.0], vec![0.0, 0.0, 0.5]]), &pv(&[0.5, 0.3, 0.2]), false)
            .unwrap();
        for (w, e) in r.weights.as_slice().iter().zip([2.5, 1.0, 0.4]) {
            assert!((w - e).abs() < 1e-14);
        }
    }

    #[test]
    fn bbse_rank_one_is_not_identifiable() {
        let r = bbse(&hard(vec![vec![0.25, 0.25], vec![0.25, 0.25]]), &pv(&[0.5, 0.5]), false);
        assert!(matches!(r, Err(Error::NotIdentifiable { .. })));
    }

    #[test]
    fn bbse_negative_solution_needs_clipping() {
        // Solution w = [-0.5, 2.5]: 0.4(-0.5) + 0.1(2.5) = 0.05.
        let c = hard(vec![vec![0.4, 0.1], vec![0.1, 0.4]]);
        let mu = pv(&[0.05, 0.95]);
        assert!(matches!(bbse(&c, &mu, false), Err(Error::InfeasibleWeights { .. })));
        let r = bbse(&c, &mu, true).unwrap();
        assert_eq!(r.weights.as_slice(), &[0.0, 2.0]);
    }

    #[test]
    fn rlls_without_penalty_matches_bbse() {
        let c = hard(vec![vec![0.4, 0.1], vec![0.1, 0.4]]);
        let r = rlls(&c, &pv(&[0.35, 0.65]), 0.0, &tight()).unwrap();
        assert!(r.converged);
        assert!((r.weights.as_slice()[0] - 0.5).abs() < 1e-9);
        assert!((r.weights.as_slice()[1] - 1.5).abs() < 1e-9);
    }

    #[test]
    fn rlls_huge_penalty_returns_ones() {
        let c = hard(vec![vec![0.4, 0.1], vec![0.1, 0.4]]);
        let r = rlls(&c, &pv(&[0.35, 0.65]), 1e9, &EstimatorConfig::default()).unwrap();
        for w in r.weights.as_slice() {
            assert!((w - 1.0).abs() < 1e-8);
        }
    }

    #[test]
    fn rlls_unit_penalty_matches_grid_and_lies_between() {
        let c = hard(vec![vec![0.4, 0.1], vec![0.1, 0.4]]);
        let r = rlls(&c, &pv(&[0.35, 0.65]), 1.0, &tight()).unwrap();
        let grid = grid_argmax_2d(0.5, 1e-4, |w0, w1| {
            let r0 = 0.4 * w0 + 0.1 * w1 - 0.35;
            let r1 = 0.1 * w0 + 0.4 * w1 - 0.65;
            -(r0 * r0 + r1 * r1 + (w0 - 1.0).powi(2) + (w1 - 1.0).powi(2))
        });
        let w = r.weights.as_slice();
        assert!((w[0] - grid).abs() < 2e-4, "{w:?} vs {grid}");
        assert!(w[0] > 0.5 && w[0] < 1.0);
        assert!(w[1] > 1.0 && w[1] < 1.5);
    }

    fn two_point_table() -> PredictorTable {
        PredictorTable::new(vec![(pv(&[0.8, 0.2]), 70.0), (pv(&[0.2, 0.8]), 30.0)], MassKind::Count).unwrap()
    }

    fn two_point_oracle() -> f64 {
        grid_argmax_2d(0.5, 1e-6, |w0, w1| {
            0.7 * libm::log(0.8 * w0 + 0.2 * w1) + 0.3 * libm::log(0.2 * w0 + 0.8 * w1)
        })
    }

    #[test]
    fn mlls_no_shift_fixed_point() {
        // Target table equal to the source output distribution of a calibrated predictor.
        let table =
            PredictorTable::new(vec![(pv(&[0.75, 0.25]), 0.5), (pv(&[0.25, 0.75]), 0.5)], MassKind::Probability).unwrap();
        let p = pv(&[0.5, 0.5]);
        for solver in [mlls_em, mlls_grad] {
            let r = solver(&table, &p, &EstimatorConfig::default()).unwrap();
            for w in r.weights.as_slice() {
                assert!((w - 1.0).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn mlls_two_point_matches_grid() {
        let oracle = two_point_oracle();
        let p = pv(&[0.5, 0.5]);
        for solver in [mlls_em, mlls_grad] {
            let r = solver(&two_point_table(), &p, &tight()).unwrap();
            assert!(r.converged);
            assert!((r.weights.as_slice()[0] - oracle).abs() < 2e-6, "{:?} vs {oracle}", r.weights);
        }
    }

    #[test]
    fn em_likelihood_is_monotone() {
        let table = two_point_table();
        let p = pv(&[0.3, 0.7]);
        let mut last = f64::NEG_INFINITY;
        mlls_em_observed(&table, &p, &tight(), |_, w| {
            let s: Vec<f64> = table.normalized().map(|(o, _)| o.dot(w)).collect();
            let ll: f64 = table.normalized().zip(&s).map(|((_, m), s)| m * libm::log(*s)).sum();
            assert!(ll >= last - 1e-15);
            last = ll;
        })
        .unwrap();
    }

    #[test]
    fn mlls_grad_uniform_predictor_is_flat() {
        let third = 1.0 / 3.0;
        let table = PredictorTable::from_outputs([pv(&[third, third, third])]).unwrap();
        let r = mlls_grad(&table, &ProbVector::uniform(3).unwrap(), &EstimatorConfig::default()).unwrap();
        assert!(r.converged);
        assert!(r.final_objective.abs() < 1e-15);
        let id = crate::diagnostics::check_identifiability(&table).unwrap();
        assert!(!id.identifiable);
    }

    #[test]
    fn single_support_point_goes_to_vertex() {
        // Maximizing log(0.9 w0 + 0.1 w1) on W puts all mass on class 0.
        let table = PredictorTable::from_outputs([pv(&[0.9, 0.1])]).unwrap();
        let p = pv(&[0.4, 0.6]);
        let vertex = 1.0 / 0.4;
        for solver in [mlls_em, mlls_grad] {
            let r = solver(&table, &p, &EstimatorConfig::default()).unwrap();
            assert!((r.weights.as_slice()[0] - vertex).abs() < 1e-6, "{:?}", r.weights);
            assert!(r.weights.as_slice()[1] < 1e-6);
        }
    }

    #[test]
    fn mlls_cm_perfect_classifier_matches_bbse() {
        let source: Vec<LabeledSample> = [0, 0, 1, 1, 1, 2]
            .iter()
            .map(|&y| LabeledSample::new(ProbVector::one_hot(3, y).unwrap(), y).unwrap())
            .collect();
        let target: Vec<ProbVector> = [0, 1, 2, 2, 2, 2].iter().map(|&y| ProbVector::one_hot(3, y).unwrap()).collect();
        let p = ProbVector::normalized(vec![2.0, 3.0, 1.0]).unwrap();
        let cm = mlls_cm(&source, &target, &p, &tight()).unwrap();
        let b = estimate(
            &EstimatorConfig::with_method(Method::BbseHard),
            EstimationData { source: &source, target: &target, source_marginal: &p },
        )
        .unwrap();
        for (a, e) in cm.weights.as_slice().iter().zip(b.weights.as_slice()) {
            assert!((a - e).abs() < 1e-6, "{:?} vs {:?}", cm.weights, b.weights);
        }
    }

    #[test]
    fn mlls_cm_single_predicted_class_is_boundary() {
        let source = vec![
            LabeledSample::new(pv(&[0.9, 0.1]), 0).unwrap(),
            LabeledSample::new(pv(&[0.8, 0.2]), 0).unwrap(),
            LabeledSample::new(pv(&[0.7, 0.3]), 1).unwrap(),
            LabeledSample::new(pv(&[0.2, 0.8]), 1).unwrap(),
        ];
        let target = vec![pv(&[0.95, 0.05]); 10];
        let p = pv(&[0.5, 0.5]);
        let r = mlls_cm(&source, &target, &p, &tight()).unwrap();
        // Calibrated row for prediction 0 is [2/3, 1/3]; objective log(2/3 w0 + 1/3 w1).
        let oracle = grid_argmax_2d(0.5, 1e-6, |w0, w1| libm::log(2.0 / 3.0 * w0 + 1.0 / 3.0 * w1));
        assert!((r.weights.as_slice()[0] - oracle).abs() < 1e-5);
        assert!((r.weights.as_slice()[0] - 2.0).abs() < 1e-5);
    }

    #[test]
    fn lsq_matches_bbse_when_square() {
        let joint = vec![vec![0.4, 0.1], vec![0.1, 0.4]];
        let m = distribution_match_lsq(&joint, &[0.35, 0.65], &pv(&[0.5, 0.5]), &tight()).unwrap();
        assert!(m.identifiable);
        assert!((m.estimate.weights.as_slice()[0] - 0.5).abs() < 1e-9);
    }

    #[test]
    fn lsq_flags_duplicate_columns() {
        let joint = vec![vec![0.2, 0.2, 0.1], vec![0.1, 0.1, 0.1], vec![0.0, 0.0, 0.2]];
        let p = pv(&[0.3, 0.3, 0.4]);
        // target generated by w = [1.5, 0.5, 1] and equally by [0.5, 1.5, 1]
        let target = mat_vec(&joint, &[1.5, 0.5, 1.0]);
        let m = distribution_match_lsq(&joint, &target, &p, &tight()).unwrap();
        assert!(!m.identifiable);
        assert!(m.estimate.final_objective < 1e-16);
        let w = m.estimate.weights.as_slice();
        // minimum-norm representative splits the tied pair evenly
        assert!((w[0] - w[1]).abs() < 1e-9);
        assert!((w[0] + w[1] - 2.0).abs() < 1e-9);
    }

    #[test]
    fn lsq_objective_is_one_hot_mmd() {
        let joint = vec![vec![0.2, 0.05], vec![0.2, 0.15], vec![0.1, 0.3]];
        let target = [0.3, 0.3, 0.4];
        for w in [[1.0, 1.0], [2.0, 0.0], [0.4, 1.6]] {
            let lsq: f64 = mat_vec(&joint, &w).iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
            assert!((lsq - mmd_squared_one_hot(&joint, &target, &w)).abs() < 1e-15);
        }
    }

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
        }
        assert!("bbse".parse::<Method>().is_err());
    }

    #[test]
    fn config_validation() {
        assert!(EstimatorConfig { max_iters: 0, ..Default::default() }.validate().is_err());
        assert!(EstimatorConfig { tol: 0.0, ..Default::default() }.validate().is_err());
        assert!(EstimatorConfig { rlls_lambda: -1.0, ..Default::default() }.validate().is_err());
    }
}

