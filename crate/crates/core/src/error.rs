use alloc::string::String;
use alloc::vec::Vec;

pub type Result<T> = core::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("empty input: {0}")]
    EmptyInput(&'static str),

    #[error("dimension mismatch: expected {expected}, found {found}")]
    DimensionMismatch { expected: usize, found: usize },

    #[error("entry {index} is negative or not finite ({value})")]
    InvalidEntry { index: usize, value: f64 },

    #[error("entries sum to {sum}, not 1")]
    NotNormalized { sum: f64 },

    #[error("weight constraint violated: sum_y w_y p_s(y) = {value}")]
    WeightConstraint { value: f64 },

    #[error("source marginal has zero mass on class {class}")]
    DegenerateMarginal { class: usize },

    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error(
        "weights are not identifiable: the confusion matrix is singular or ill-conditioned \
         (condition estimate {condition:e}); the class-conditional predictor distributions \
         must be linearly independent"
    )]
    NotIdentifiable { condition: f64 },

    #[error("solution has negative weights {weights:?}; enable clipping to project onto the weight simplex")]
    InfeasibleWeights { weights: Vec<f64> },

    #[error("no convergence after {iterations} iterations (residual {residual:e})")]
    NonConvergence { iterations: usize, residual: f64 },

    #[error("support point {index} has f(x)^T w = {value}; log-likelihood undefined")]
    Domain { index: usize, value: f64 },

    #[error("prediction {prediction} never occurs on the source sample; its confusion row is empty")]
    ZeroMassRow { prediction: usize },

    #[error("output has a zero entry at class {class}; clip before taking logarithms")]
    ZeroProbability { class: usize },

    #[error("validation set contains a single class; calibration is degenerate")]
    SingleClass,

    #[error("threshold classifier with c = 0.5 carries no information")]
    DegenerateClassifier,

    #[error("class {class} has positive target mass but no example in the pool")]
    EmptyPoolClass { class: usize },
}
