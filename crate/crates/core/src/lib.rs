//! Label-shift estimation under the distribution-matching view.
//!
//! Given a black-box predictor `f: X -> Δ^{k-1}`, labeled source data and
//! unlabeled target data, the estimators in this crate recover the
//! importance weights `w(y) = p_t(y) / p_s(y)`:
//!
//! * [`estimators::bbse`] and [`estimators::rlls`] match confusion-matrix
//!   moments,
//! * [`estimators::mlls_em`] and [`estimators::mlls_grad`] maximize the
//!   plug-in target log-likelihood over the weight simplex,
//! * [`estimators::mlls_cm`] runs the likelihood estimator on a predictor
//!   recalibrated through the rows of the hard confusion matrix.
//!
//! [`calibration`] fits bias-corrected temperature scaling and estimates the
//! canonical calibration error, [`diagnostics`] computes the curvature and
//! finite-sample bound ingredients, and [`simulation`] reproduces the
//! two-Gaussian benchmark with a counter-based random stream.
//!
//! The crate is `no_std` and needs only `alloc`.
#![no_std]

extern crate alloc;

pub mod calibration;
pub mod confusion;
pub mod diagnostics;
mod error;
pub mod estimators;
pub mod linalg;
pub mod predictors;
pub mod rng;
pub mod simplex;
pub mod simulation;
pub mod special;

pub use error::{Error, Result};
pub use simplex::{LabeledSample, MassKind, PredictorTable, ProbVector, WeightVector};
