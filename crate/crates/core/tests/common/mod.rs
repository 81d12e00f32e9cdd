//! Fixtures shared by the integration tests.

use labelshift_core::rng::CounterRng;
use labelshift_core::simplex::project_to_weight_simplex;
use labelshift_core::{MassKind, PredictorTable, ProbVector, WeightVector};

/// Outputs of the six-point marginally (not canonically) calibrated predictor.
pub const SIX_POINT_F: [[f64; 3]; 6] = [
    [0.1, 0.2, 0.7],
    [0.1, 0.7, 0.2],
    [0.2, 0.1, 0.7],
    [0.2, 0.7, 0.1],
    [0.7, 0.1, 0.2],
    [0.7, 0.2, 0.1],
];

/// `P_s(y | f(x_i))` for the same six points.
pub const SIX_POINT_POSTERIOR: [[f64; 3]; 6] = [
    [0.2, 0.1, 0.7],
    [0.0, 0.8, 0.2],
    [0.1, 0.2, 0.7],
    [0.3, 0.6, 0.1],
    [0.8, 0.0, 0.2],
    [0.6, 0.3, 0.1],
];

/// Population target table for prior `[α, β, 1 − α − β]` with
/// `p_s(x_i) = 1/6`, i.e. `p_t(x_i) = ½ Σ_y P_s(y | f(x_i)) prior_y`.
pub fn six_point_target(prior: [f64; 3]) -> PredictorTable {
    let entries = SIX_POINT_F
        .iter()
        .zip(&SIX_POINT_POSTERIOR)
        .map(|(f, post)| {
            let mass = 0.5 * (0..3).map(|y| post[y] * prior[y]).sum::<f64>();
            (ProbVector::new(f.to_vec()).unwrap(), mass)
        })
        .collect();
    PredictorTable::new(entries, MassKind::Probability).unwrap()
}

/// A random table with `k` classes, its source marginal and a feasible `w`.
pub struct Instance {
    pub table: PredictorTable,
    pub source_marginal: ProbVector,
    pub w: WeightVector,
}

pub fn random_instance(rng: &mut CounterRng, min_support: usize) -> Instance {
    let k = 2 + rng.below(4);
    let support = min_support.max(1) + rng.below(8);
    let entries = (0..support)
        .map(|_| {
            let f: Vec<f64> = (0..k).map(|_| 0.01 + rng.uniform()).collect();
            (ProbVector::normalized(f).unwrap(), 0.1 + rng.uniform())
        })
        .collect();
    let table = PredictorTable::new(entries, MassKind::Count).unwrap();
    let source_marginal = ProbVector::normalized((0..k).map(|_| 0.05 + rng.uniform()).collect()).unwrap();
    let raw: Vec<f64> = (0..k).map(|_| 3.0 * rng.uniform()).collect();
    let w = project_to_weight_simplex(&raw, &source_marginal).unwrap();
    Instance { table, source_marginal, w }
}
